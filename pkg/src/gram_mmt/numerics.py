"""Dense tensors with tape-based reverse-mode differentiation.

Everything the toy transformer needs and nothing more. Tensors wrap numpy
arrays; every differentiable op appends its output node to a global tape and
:func:`backward` replays the tape in reverse.

Precision is float32 unless switched with :func:`set_precision` (float64 is
used for finite-difference gradient checks).
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


_state = {"dtype": np.float32, "grad": True, "debug": False}
_tape: list["Tensor"] = []


def get_dtype():
    return _state["dtype"]


def set_precision(bits: int) -> None:
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state["dtype"] = np.float32 if bits == 32 else np.float64


@contextlib.contextmanager
def precision(bits: int):
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every op."""
    _state["debug"] = bool(enabled)


def debug_enabled() -> bool:
    return _state["debug"]


@contextlib.contextmanager
def no_grad():
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def clear_tape() -> None:
    _tape.clear()


def tape_length() -> int:
    return len(_tape)


def rng(seed: int, *names: str | int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a name path.

    ``rng(13, "init", "encoder")`` and ``rng(13, "init", "decoder")`` are
    independent streams; the same path always yields the same stream.
    """
    path = repr((int(seed),) + tuple(names)).encode()
    key = int.from_bytes(hashlib.blake2b(path, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != get_dtype():
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c: float):
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A named leaf tensor. ``trainable=False`` freezes it: no gradient is
    recorded for it and optimizers never touch its value."""

    __slots__ = ("name", "_trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self._trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        self.requires_grad = self._trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self._trainable:
            self.grad += g

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self._trainable})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced by " + getattr(backward_fn, "__qualname__", "op"))
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        _tape.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bw(g):
        return (g * c,)

    return _record(a.data * c, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, a.data.dtype.type(0)), (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1 - y * y),)

    return _record(y, (a,), bw)


# --- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _record(a.data.transpose(axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    def bw(g):
        return (_unbroadcast(g, a.shape),)

    return _record(np.broadcast_to(a.data, shape).copy(), (a,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(a.data.sum(), dtype=a.data.dtype).reshape(()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


# --- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), bw)


# --- normalisation / probabilities -----------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable, True = keep) zeroes
    excluded entries exactly."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"layer_norm: last axis {x.shape[-1]} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _record(xhat * gain.data + bias.data, (x, gain, bias), bw)


def log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has shape (..., V) and ``targets`` the leading shape.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    if t.size and (t.max() >= V or t.min() < 0):
        raise IndexError(f"target id {int(t.max())} outside vocabulary of size {V}")
    keep = np.ones_like(t, dtype=bool) if pad_id is None else t != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("empty loss support: every target is padding")
    logp = log_softmax_np(flat)
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[rows, t[rows]] -= 1
        p[~keep] = 0
        return ((g / count) * p.reshape(logits.shape),)

    return _record(np.asarray(loss, dtype=flat.dtype).reshape(()), (logits,), bw)


# --- reverse pass -----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every trainable Parameter reachable
    on the tape, then clear the tape."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(_tape):
            g = node.grad
            if g is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)
            node.grad = None
    finally:
        _tape.clear()


def finite_difference_gradient(f: Callable[[Parameter], "Tensor | float"], p: Parameter,
                               epsilon: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of df/dp, one coordinate at a time.

    Must run in 64-bit mode; ``p`` is perturbed in place and restored.
    """
    if get_dtype() != np.float64 or p.data.dtype != np.float64:
        raise RuntimeError("finite_difference_gradient requires 64-bit mode")

    def value():
        with no_grad():
            out = f(p)
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    flat = p.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = value()
        flat[i] = orig - epsilon
        down = value()
        flat[i] = orig
        grad[i] = (up - down) / (2 * epsilon)
    return grad.reshape(p.shape)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()

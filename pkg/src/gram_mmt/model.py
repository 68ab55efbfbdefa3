"""Toy encoder-decoder translation transformer and its gated multimodal extension.

The base model is a post-norm encoder-decoder transformer. ``attach_adapters``
freezes it and adds a vision projection, a perceiver resampler and one gated
vision-text cross-attention layer in front of each selected transformer layer.
With every gate at zero the extended model computes exactly the base logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

INSERTION_SITES = ("encoder", "decoder", "both")


@dataclass
class ModelConfig:
    d_model: int = 64
    vocab_size: int = 100
    n_enc: int = 2
    n_dec: int = 2
    heads: int = 4
    d_ff: int = 128
    enc_dim: int = 32          # length of one vision encoding
    n_latents: int = 8         # learned latent queries in the resampler
    resampler_depth: int = 2
    vt_heads: int = 4
    vt_d_ff: int = 128
    insertion_site: str = "encoder"
    max_len: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            if f.name != "insertion_site":
                v = getattr(self, f.name)
                if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                    raise ValueError(f"ModelConfig.{f.name} must be a positive integer, got {v!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_model % self.vt_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by vt_heads={self.vt_heads}")
        if self.insertion_site not in INSERTION_SITES:
            raise ValueError(f"insertion_site must be one of {INSERTION_SITES}, got {self.insertion_site!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**self.to_dict(), **changes})


@dataclass
class Batch:
    """Padded model input. ``images`` is B x L x e with ``image_mask`` marking
    real encodings; ``tgt_in``/``tgt_out`` are the BOS-shifted and
    EOS-terminated target streams."""

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    images: np.ndarray
    image_mask: np.ndarray

    def __len__(self):
        return self.src.shape[0]

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


# --- building blocks --------------------------------------------------------

class Module:
    def parameters(self) -> Iterator[Parameter]:
        for val in vars(self).values():
            yield from _params_of(val)

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


def _params_of(val):
    if isinstance(val, Parameter):
        yield val
    elif isinstance(val, Module):
        yield from val.parameters()
    elif isinstance(val, (list, tuple)):
        for item in val:
            yield from _params_of(item)


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, gen: np.random.Generator):
        bound = math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(gen.uniform(-bound, bound, (d_in, d_out)), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, name: str, d: int):
        self.gain = Parameter(np.ones(d), f"{name}.gain")
        self.bias = Parameter(np.zeros(d), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, name: str, d: int, d_ff: int, gen):
        self.fc1 = Linear(f"{name}.fc1", d, d_ff, gen)
        self.fc2 = Linear(f"{name}.fc2", d_ff, d, gen)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.relu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, name: str, d: int, heads: int, gen):
        self.heads = heads
        self.q = Linear(f"{name}.q", d, d, gen)
        self.k = Linear(f"{name}.k", d, d, gen)
        self.v = Linear(f"{name}.v", d, d, gen)
        self.o = Linear(f"{name}.o", d, d, gen)

    def __call__(self, query: Tensor, kv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` broadcasts to B x heads x n x m; True marks visible keys."""
        B, n, d = query.shape
        m = kv.shape[1]
        H = self.heads
        dh = d // H
        q = self.q(query).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
        k = self.k(kv).reshape(B, m, H, dh).transpose(0, 2, 3, 1)
        v = self.v(kv).reshape(B, m, H, dh).transpose(0, 2, 1, 3)
        scores = nx.scale(q, 1.0 / math.sqrt(dh)) @ k
        weights = nx.softmax(scores, axis=-1, mask=mask)
        out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
        return self.o(out)


class EncoderLayer(Module):
    def __init__(self, name: str, cfg: ModelConfig, gen):
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.d_model, cfg.heads, gen)
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, gen)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model)

    def __call__(self, x, mask):
        x = self.ln1(x + self.self_attn(x, x, mask))
        return self.ln2(x + self.ff(x))


class DecoderLayer(Module):
    def __init__(self, name: str, cfg: ModelConfig, gen):
        self.self_attn = MultiHeadAttention(f"{name}.self_attn", cfg.d_model, cfg.heads, gen)
        self.ln1 = LayerNorm(f"{name}.ln1", cfg.d_model)
        self.cross_attn = MultiHeadAttention(f"{name}.cross_attn", cfg.d_model, cfg.heads, gen)
        self.ln2 = LayerNorm(f"{name}.ln2", cfg.d_model)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.d_ff, gen)
        self.ln3 = LayerNorm(f"{name}.ln3", cfg.d_model)

    def __call__(self, y, self_mask, z, cross_mask):
        y = self.ln1(y + self.self_attn(y, y, self_mask))
        y = self.ln2(y + self.cross_attn(y, z, cross_mask))
        return self.ln3(y + self.ff(y))


# --- base model -------------------------------------------------------------

class BaseModel(Module):
    """Text-only encoder-decoder transformer."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.config = cfg
        d = cfg.d_model
        gen = nx.rng(seed, "base", "embed")
        self.tokens = Parameter(gen.normal(0.0, d ** -0.5, (cfg.vocab_size, d)), "embed.tokens")
        self.positions = Parameter(gen.normal(0.0, 0.02, (cfg.max_len, d)), "embed.positions")
        self.encoder = [EncoderLayer(f"encoder.layer{i}", cfg, nx.rng(seed, "base", "encoder", i))
                        for i in range(cfg.n_enc)]
        self.decoder = [DecoderLayer(f"decoder.layer{i}", cfg, nx.rng(seed, "base", "decoder", i))
                        for i in range(cfg.n_dec)]
        self.output = Linear("output.proj", d, cfg.vocab_size, nx.rng(seed, "base", "output"))

    def base_parameters(self) -> list[Parameter]:
        return list(Module.parameters(self))

    def _embed(self, ids: np.ndarray) -> Tensor:
        n = ids.shape[1]
        if n > self.config.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len={self.config.max_len}")
        x = nx.scale(nx.embedding(self.tokens, ids), math.sqrt(self.config.d_model))
        return x + nx.embedding(self.positions, np.arange(n))

    def encode(self, src: np.ndarray, vision=None, adapters=None) -> tuple[Tensor, np.ndarray]:
        src = np.asarray(src)
        key_mask = (src != PAD_ID)[:, None, None, :]
        x = self._embed(src)
        for i, layer in enumerate(self.encoder):
            if adapters is not None and adapters[i] is not None:
                x = adapters[i](x, vision)
            x = layer(x, key_mask)
        return x, key_mask

    def decode(self, tgt_in: np.ndarray, z: Tensor, src_mask: np.ndarray,
               vision=None, adapters=None) -> Tensor:
        tgt_in = np.asarray(tgt_in)
        m = tgt_in.shape[1]
        causal = np.tril(np.ones((m, m), dtype=bool))[None, None]
        self_mask = causal & (tgt_in != PAD_ID)[:, None, None, :]
        # a pad query would otherwise see no key at all
        self_mask = self_mask | np.eye(m, dtype=bool)[None, None]
        y = self._embed(tgt_in)
        for i, layer in enumerate(self.decoder):
            if adapters is not None and adapters[i] is not None:
                y = adapters[i](y, vision)
            y = layer(y, self_mask, z, src_mask)
        return self.output(y)

    def forward(self, batch: Batch) -> Tensor:
        z, src_mask = self.encode(batch.src)
        return self.decode(batch.tgt_in, z, src_mask)

    __call__ = forward


def build_base(cfg: ModelConfig, seed: int) -> BaseModel:
    cfg.validate()
    return BaseModel(cfg, seed)


# --- multimodal components --------------------------------------------------

class PerceiverLayer(Module):
    def __init__(self, name: str, cfg: ModelConfig, gen):
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.d_model, cfg.vt_heads, gen)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.vt_d_ff, gen)

    def __call__(self, latents: Tensor, w: Tensor, w_mask: np.ndarray) -> Tensor:
        B, r = latents.shape[0], latents.shape[1]
        kv = nx.concat([w, latents], axis=1)
        mask = np.concatenate([w_mask, np.ones((B, r), dtype=bool)], axis=1)[:, None, None, :]
        lat = latents + self.attn(latents, kv, mask)
        return lat + self.ff(lat)


class PerceiverResampler(Module):
    """Maps any number of vision embeddings to ``n_latents`` vision tokens."""

    def __init__(self, cfg: ModelConfig, seed: int):
        gen = nx.rng(seed, "resampler", "latents")
        self.latents = Parameter(gen.normal(0.0, 0.02, (cfg.n_latents, cfg.d_model)), "resampler.latents")
        self.layers = [PerceiverLayer(f"resampler.layer{j}", cfg, nx.rng(seed, "resampler", j))
                       for j in range(cfg.resampler_depth)]

    def __call__(self, w: Tensor, w_mask: np.ndarray) -> Tensor:
        B = w.shape[0]
        lat = nx.broadcast_to(self.latents, (B,) + self.latents.shape)
        for layer in self.layers:
            lat = layer(lat, w, w_mask)
        return lat


class GatedCrossAttention(Module):
    """x' = x + tanh(g_a) * MHA(q=x, kv=p);  out = x' + tanh(g_f) * FF(x')."""

    def __init__(self, name: str, cfg: ModelConfig, gen):
        self.attn = MultiHeadAttention(f"{name}.attn", cfg.d_model, cfg.vt_heads, gen)
        self.ff = FeedForward(f"{name}.ff", cfg.d_model, cfg.vt_d_ff, gen)
        self.g_a = Parameter(np.zeros(1), f"{name}.g_a")
        self.g_f = Parameter(np.zeros(1), f"{name}.g_f")

    @property
    def gammas(self) -> tuple[float, float]:
        return float(np.tanh(self.g_a.data[0])), float(np.tanh(self.g_f.data[0]))

    def __call__(self, x: Tensor, p: Tensor) -> Tensor:
        x = x + nx.tanh(self.g_a) * self.attn(x, p)
        return x + nx.tanh(self.g_f) * self.ff(x)


class GatedMMTModel(Module):
    """A frozen :class:`BaseModel` plus trainable vision components."""

    def __init__(self, base: BaseModel, cfg: ModelConfig, seed: int):
        self.base = base
        self.config = cfg
        self.vision = Linear("vision.proj", cfg.enc_dim, cfg.d_model, nx.rng(seed, "vision"))
        self.resampler = PerceiverResampler(cfg, seed)
        site = cfg.insertion_site
        self.enc_adapters = [
            GatedCrossAttention(f"encoder.layer{i}.gca", cfg, nx.rng(seed, "gca", "encoder", i))
            if site in ("encoder", "both") else None
            for i in range(cfg.n_enc)
        ]
        self.dec_adapters = [
            GatedCrossAttention(f"decoder.layer{i}.gca", cfg, nx.rng(seed, "gca", "decoder", i))
            if site in ("decoder", "both") else None
            for i in range(cfg.n_dec)
        ]

    @property
    def adapters(self) -> list[GatedCrossAttention]:
        """Adapters ordered from the input side: encoder first, then decoder."""
        return [a for a in self.enc_adapters + self.dec_adapters if a is not None]

    def adapter_parameters(self) -> list[Parameter]:
        return [p for key in ("vision", "resampler", "enc_adapters", "dec_adapters")
                for p in _params_of(getattr(self, key))]

    def project_vision(self, images: np.ndarray) -> Tensor:
        if images.shape[-1] != self.config.enc_dim:
            raise ValueError(f"vision encoding length {images.shape[-1]} != enc_dim={self.config.enc_dim}")
        return self.vision(Tensor(images))

    def vision_tokens(self, images: np.ndarray, image_mask: np.ndarray) -> Tensor:
        w = self.project_vision(np.asarray(images))
        return self.resampler(w, np.asarray(image_mask, dtype=bool))

    def encode(self, src, p):
        return self.base.encode(src, p, self.enc_adapters)

    def decode(self, tgt_in, z, src_mask, p):
        return self.base.decode(tgt_in, z, src_mask, p, self.dec_adapters)

    def forward(self, batch: Batch) -> Tensor:
        p = self.vision_tokens(batch.images, batch.image_mask)
        z, src_mask = self.encode(batch.src, p)
        return self.decode(batch.tgt_in, z, src_mask, p)

    __call__ = forward

    def set_gates(self, g_a: float | None = None, g_f: float | None = None) -> None:
        for a in self.adapters:
            if g_a is not None:
                a.g_a.data[...] = g_a
            if g_f is not None:
                a.g_f.data[...] = g_f


def attach_adapters(base: BaseModel, cfg: ModelConfig, seed: int) -> GatedMMTModel:
    """Freeze ``base`` and wrap it with zero-gated vision adapters."""
    cfg.validate()
    bc = base.config
    for key in ("d_model", "vocab_size", "n_enc", "n_dec", "heads", "d_ff", "max_len"):
        if getattr(bc, key) != getattr(cfg, key):
            raise ValueError(f"config.{key}={getattr(cfg, key)} does not match base model ({getattr(bc, key)})")
    for p in base.base_parameters():
        p.trainable = False
        p.zero_grad()
    return GatedMMTModel(base, cfg, seed)


def base_of(model) -> BaseModel:
    return model.base if isinstance(model, GatedMMTModel) else model


def is_gated(model) -> bool:
    return isinstance(model, GatedMMTModel)


# --- inspection -------------------------------------------------------------

def gate_values(model) -> list[tuple[int, float, float]]:
    """(layer, tanh(g_a), tanh(g_f)) per adapter; layer 1 is nearest the input."""
    if not is_gated(model):
        return []
    return [(i + 1, *a.gammas) for i, a in enumerate(model.adapters)]


def count_parameters(model, trainable_only: bool = False) -> int:
    return sum(p.data.size for p in model.parameters() if p.trainable or not trainable_only)


def parameter_breakdown(cfg: ModelConfig, gated: bool = True) -> dict[str, int]:
    """Closed-form parameter counts per component."""
    d, V = cfg.d_model, cfg.vocab_size
    attn = 4 * d * d + 4 * d
    ln = 2 * d

    def ff(width):
        return 2 * d * width + width + d

    out = {
        "embeddings": V * d + cfg.max_len * d,
        "encoder": cfg.n_enc * (attn + ff(cfg.d_ff) + 2 * ln),
        "decoder": cfg.n_dec * (2 * attn + ff(cfg.d_ff) + 3 * ln),
        "output": d * V + V,
    }
    if gated:
        sites = {"encoder": cfg.n_enc, "decoder": cfg.n_dec, "both": cfg.n_enc + cfg.n_dec}[cfg.insertion_site]
        out["vision_projection"] = cfg.enc_dim * d + d
        out["resampler"] = cfg.n_latents * d + cfg.resampler_depth * (attn + ff(cfg.vt_d_ff))
        out["adapters"] = sites * (attn + ff(cfg.vt_d_ff))
        out["gates"] = 2 * sites
    return out


BASE_COMPONENTS = ("embeddings", "encoder", "decoder", "output")


def expected_parameter_count(cfg: ModelConfig, gated: bool = True, trainable_only: bool = False) -> int:
    parts = parameter_breakdown(cfg, gated)
    if trainable_only and gated:
        return sum(v for k, v in parts.items() if k not in BASE_COMPONENTS)
    return sum(parts.values())


# --- batching helpers -------------------------------------------------------

def pad_images(image_sets: Sequence[np.ndarray | None], enc_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-record encoding sets into B x L x e plus a validity mask.

    An empty or missing set becomes one zero encoding. Rows of each set are
    put in a canonical (lexicographic) order, so the result does not depend
    on the order images were listed in.
    """
    sets = []
    for s in image_sets:
        if s is None or np.size(s) == 0:
            arr = np.zeros((1, enc_dim))
        else:
            arr = np.asarray(s, dtype=np.float64)
            if arr.ndim == 1:
                arr = arr[None]
            if arr.shape[-1] != enc_dim:
                raise ValueError(f"vision encoding length {arr.shape[-1]} != enc_dim={enc_dim}")
        if arr.shape[0] == 0:
            arr = np.zeros((1, enc_dim))
        if arr.shape[0] > 1:
            arr = arr[np.lexsort(arr.T[::-1])]
        sets.append(arr)
    L = max(a.shape[0] for a in sets)
    images = np.zeros((len(sets), L, enc_dim), dtype=nx.get_dtype())
    mask = np.zeros((len(sets), L), dtype=bool)
    for i, a in enumerate(sets):
        images[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return images, mask


def _pad(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batch(srcs: Sequence[Sequence[int]], tgts: Sequence[Sequence[int]],
               image_sets: Sequence[np.ndarray | None], enc_dim: int) -> Batch:
    """EOS is appended to sources; targets become (BOS + tgt, tgt + EOS)."""
    if not srcs or len(srcs) != len(tgts) or len(srcs) != len(image_sets):
        raise ValueError("make_batch needs equal, nonzero numbers of sources, targets and image sets")
    images, mask = pad_images(image_sets, enc_dim)
    return Batch(
        src=_pad([list(s) + [EOS_ID] for s in srcs]),
        tgt_in=_pad([[BOS_ID] + list(t) for t in tgts]),
        tgt_out=_pad([list(t) + [EOS_ID] for t in tgts]),
        images=images,
        image_mask=mask,
    )


# --- decoding ---------------------------------------------------------------

def _encode_inputs(model, srcs, image_sets):
    enc_dim = model.config.enc_dim
    dummy = [[] for _ in srcs]
    batch = make_batch(srcs, dummy, image_sets, enc_dim)
    if is_gated(model):
        p = model.vision_tokens(batch.images, batch.image_mask)
        z, src_mask = model.encode(batch.src, p)
        return z, src_mask, p
    z, src_mask = model.encode(batch.src)
    return z, src_mask, None


def _next_logits(model, prefix: np.ndarray, z, src_mask, p) -> np.ndarray:
    if is_gated(model):
        logits = model.decode(prefix, z, src_mask, p)
    else:
        logits = model.decode(prefix, z, src_mask)
    return logits.data[:, -1, :]


def greedy_decode(model, srcs: Sequence[Sequence[int]], image_sets=None, max_len: int = 50,
                  beam: int = 1) -> list[list[int]]:
    """Decode a list of sources; outputs exclude BOS/EOS.

    ``beam > 1`` runs a per-sentence beam search instead of the batched
    greedy loop.
    """
    if image_sets is None:
        image_sets = [None] * len(srcs)
    if beam > 1:
        return [beam_search(model, s, im, max_len, beam) for s, im in zip(srcs, image_sets)]
    max_len = min(max_len, model.config.max_len)
    with nx.no_grad():
        z, src_mask, p = _encode_inputs(model, srcs, image_sets)
        B = len(srcs)
        prefix = np.full((B, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            nxt = _next_logits(model, prefix, z, src_mask, p).argmax(axis=-1)
            for i in range(B):
                if not done[i]:
                    if nxt[i] == EOS_ID:
                        done[i] = True
                    else:
                        outs[i].append(int(nxt[i]))
            if done.all():
                break
            prefix = np.concatenate([prefix, np.where(done, PAD_ID, nxt)[:, None]], axis=1)
    return outs


def beam_search(model, src: Sequence[int], images=None, max_len: int = 50, width: int = 4) -> list[int]:
    max_len = min(max_len, model.config.max_len)
    with nx.no_grad():
        z, src_mask, p = _encode_inputs(model, [src], [images])
        beams = [([], 0.0)]
        finished = []
        for _ in range(max_len):
            prefixes = np.array([[BOS_ID] + toks for toks, _ in beams], dtype=np.int64)
            k = len(beams)
            zb = Tensor(np.repeat(z.data, k, axis=0))
            pb = None if p is None else Tensor(np.repeat(p.data, k, axis=0))
            logp = nx.log_softmax_np(_next_logits(model, prefixes, zb, np.repeat(src_mask, k, axis=0), pb))
            cands = []
            for b, (toks, score) in enumerate(beams):
                for t in np.argsort(-logp[b], kind="stable")[:width]:
                    cands.append((toks + [int(t)], score + float(logp[b, t])))
            cands.sort(key=lambda c: -c[1])
            beams = []
            for toks, score in cands[:width]:
                (finished if toks[-1] == EOS_ID else beams).append((toks, score))
            if not beams:
                break
        pool = finished or beams
        best = max(pool, key=lambda c: c[1] / len(c[0]))[0]
    return best[:-1] if best and best[-1] == EOS_ID else best

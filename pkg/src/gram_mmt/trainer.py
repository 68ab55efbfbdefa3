"""Cross-entropy training with Adam, linear warm-up schedules and gate logging."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .config import OptimizerConfig, TrainConfig
from .datapipe import DataError, TripletDataset, record_images
from .evaluation import validation_bleu
from .model import PAD_ID, gate_values, is_gated, make_batch
from .numerics import NumericError, Parameter

log = logging.getLogger(__name__)

MODES = ("base", "pretrain", "finetune", "direct")


def lr_at_step(step: int, cfg: OptimizerConfig) -> float:
    """Linear warm-up from ``floor_lr`` to ``peak_lr`` over ``warmup_steps``,
    then constant or inverse-square-root decay."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step < cfg.warmup_steps:
        return cfg.floor_lr + (step / cfg.warmup_steps) * (cfg.peak_lr - cfg.floor_lr)
    if cfg.decay == "none":
        return cfg.peak_lr
    return cfg.peak_lr * math.sqrt(cfg.warmup_steps / step)


class Adam:
    """Adam with bias correction. Frozen parameters are skipped entirely."""

    def __init__(self, params: Iterable[Parameter], beta1=0.9, beta2=0.98, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params if p.trainable}

    @classmethod
    def from_config(cls, params, cfg: OptimizerConfig) -> "Adam":
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if nx.debug_enabled() and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name}")
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"step": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["step"])
        for kind in ("m", "v"):
            target = getattr(self, kind)
            for name, arr in state[kind].items():
                if name in target:
                    target[name][...] = arr


def adam_step(params: list[Parameter], state: Adam, lr: float) -> Adam:
    """Functional spelling of ``state.step(lr)`` over ``params``."""
    if [p.name for p in params] != [p.name for p in state.params]:
        raise ValueError("optimizer state was built for a different parameter list")
    state.step(lr)
    return state


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.trainable))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.trainable:
                p.grad *= factor
    return total


# --- gate trajectory ------------------------------------------------------------

@dataclass
class GateEntry:
    step: int
    epoch: int
    gates: list  # (layer, gamma_a, gamma_f)


@dataclass
class GateTrajectory:
    entries: list[GateEntry] = field(default_factory=list)

    def append(self, step: int, epoch: int, gates) -> GateEntry:
        if self.entries and step <= self.entries[-1].step:
            raise ValueError(f"gate log steps must increase ({step} after {self.entries[-1].step})")
        entry = GateEntry(step, epoch, [tuple(g) for g in gates])
        self.entries.append(entry)
        return entry

    def __len__(self):
        return len(self.entries)

    def max_abs(self, which: str = "a") -> float:
        """Largest |gamma| over layers in the final entry."""
        if not self.entries:
            return 0.0
        col = 1 if which == "a" else 2
        return max((abs(g[col]) for g in self.entries[-1].gates), default=0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "layer", "gamma_a", "gamma_f"])
            for e in self.entries:
                for layer, ga, gf in e.gates:
                    w.writerow([e.step, e.epoch, layer, repr(float(ga)), repr(float(gf))])

    @classmethod
    def from_csv(cls, path) -> "GateTrajectory":
        traj = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            step, epoch = int(row["step"]), int(row["epoch"])
            gate = (int(row["layer"]), float(row["gamma_a"]), float(row["gamma_f"]))
            if traj.entries and traj.entries[-1].step == step:
                traj.entries[-1].gates.append(gate)
            else:
                traj.append(step, epoch, [gate])
        return traj


def log_gates(model, step: int, trajectory: GateTrajectory, epoch: int = 0) -> GateEntry:
    if not is_gated(model):
        raise ValueError("gate logging needs a gated model")
    return trajectory.append(step, epoch, gate_values(model))


# --- training loop --------------------------------------------------------------

@dataclass
class TrainRun:
    mode: str
    seed: int
    config: dict
    losses: list[float] = field(default_factory=list)
    gates: GateTrajectory = field(default_factory=GateTrajectory)
    epochs_completed: int = 0
    valid_bleu: list[float] = field(default_factory=list)
    selection: str = "last"
    best_epoch: int | None = None
    best_state: dict | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)


def _length(rec) -> int:
    return max(len(rec.src), len(rec.tgt)) + 1


def make_batches(dataset: TripletDataset, batch_tokens: int, gen: np.random.Generator) -> list[list[int]]:
    """Group records of similar length so that padded size stays within
    ``batch_tokens``; the returned batch order is shuffled."""
    order = gen.permutation(len(dataset))
    lengths = np.array([_length(dataset[i]) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    batches, cur, widest = [], [], 0
    for i in order:
        n = _length(dataset[int(i)])
        if cur and max(widest, n) * (len(cur) + 1) > batch_tokens:
            batches.append(cur)
            cur, widest = [], 0
        cur.append(int(i))
        widest = max(widest, n)
    if cur:
        batches.append(cur)
    return [batches[k] for k in gen.permutation(len(batches))]


def batch_from_records(records, store, enc_dim: int):
    return make_batch([r.src for r in records], [r.tgt for r in records],
                      [record_images(r, store) for r in records], enc_dim)


def _check_mode(model, mode):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "base":
        if is_gated(model):
            raise ValueError("mode 'base' trains a text-only BaseModel")
        if not all(p.trainable for p in model.parameters()):
            raise ValueError("mode 'base' needs every base parameter trainable")
    elif not is_gated(model):
        raise ValueError(f"mode {mode!r} needs a model with adapters attached")


def train(model, dataset: TripletDataset, cfg: OptimizerConfig, seed: int, mode: str, store=None,
          valid: TripletDataset | None = None, train_cfg: TrainConfig | None = None,
          on_epoch_end: Callable[[int, TrainRun, Adam], None] | None = None,
          optimizer: Adam | None = None) -> TrainRun:
    """Train ``model`` in place and return the run record.

    ``finetune`` and ``direct`` select the epoch with the best validation
    BLEU4 when ``valid`` is given and restore its weights at the end; other
    modes keep the last epoch.
    """
    train_cfg = train_cfg or TrainConfig()
    _check_mode(model, mode)
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    missing = [i for i in sorted(dataset.image_ids()) if store is None or i not in store]
    if missing:
        raise DataError(f"image id {missing[0]!r} is not in the vision store ({len(missing)} unresolvable)")

    params = list(model.parameters())
    trainable = [p for p in params if p.trainable]
    opt = optimizer or Adam.from_config(params, cfg)
    run = TrainRun(mode=mode, seed=seed, config={"optim": vars(cfg).copy(), "train": vars(train_cfg).copy(),
                                                 "model": model.config.to_dict()})
    select_best = mode in ("finetune", "direct") and valid is not None and len(valid) > 0
    run.selection = "best_valid" if select_best else "last"
    best = -1.0
    gated = is_gated(model)
    enc_dim = model.config.enc_dim
    every = max(1, train_cfg.gate_log_every)
    step = opt.t
    if gated:
        log_gates(model, step, run.gates, 0)
    old_debug = nx.debug_enabled()
    nx.set_debug(train_cfg.debug_nan or old_debug)
    try:
        for epoch in range(1, cfg.epochs + 1):
            for idx in make_batches(dataset, cfg.batch_tokens, nx.rng(seed, "batches", epoch)):
                batch = batch_from_records([dataset[i] for i in idx], store, enc_dim)
                for p in trainable:
                    p.zero_grad()
                nx.clear_tape()
                loss = nx.cross_entropy(model(batch), batch.tgt_out, PAD_ID)
                nx.backward(loss)
                if cfg.clip_norm > 0:
                    clip_grad_norm(trainable, cfg.clip_norm)
                opt.step(lr_at_step(step, cfg))
                step += 1
                run.losses.append(loss.item())
                if gated and step % every == 0:
                    log_gates(model, step, run.gates, epoch)
                if train_cfg.max_steps and run.steps >= train_cfg.max_steps:
                    break
            run.epochs_completed = epoch
            if select_best:
                score = validation_bleu(model, valid, store, train_cfg.decode_max_len)
                run.valid_bleu.append(score)
                if score > best:
                    best = score
                    run.best_epoch = epoch
                    run.best_state = {p.name: p.data.copy() for p in trainable}
            log.info("epoch %d step %d loss %.4f", epoch, step, run.losses[-1])
            if on_epoch_end is not None:
                on_epoch_end(epoch, run, opt)
            if train_cfg.max_steps and run.steps >= train_cfg.max_steps:
                break
    finally:
        nx.set_debug(old_debug)
    if gated and run.gates.entries[-1].step != step:
        log_gates(model, step, run.gates, run.epochs_completed)
    if select_best and run.best_state is not None:
        named = model.named_parameters()
        for name, arr in run.best_state.items():
            named[name].data[...] = arr
    else:
        run.best_epoch = run.epochs_completed
    return run

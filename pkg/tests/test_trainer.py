import math

import numpy as np
import pytest

from gram_mmt import datapipe as D
from gram_mmt import model as M
from gram_mmt import numerics as nx
from gram_mmt import trainer as T
from gram_mmt.config import ConfigError, OptimizerConfig, TrainConfig, load_config, preset_path
from gram_mmt.io import VisionEncodingStore
from gram_mmt.numerics import Parameter


class TestSchedule:
    def test_pretrain_anchors(self):
        cfg = load_config(preset_path("paper_pretrain")).optim
        assert T.lr_at_step(0, cfg) == 1e-7
        assert T.lr_at_step(4000, cfg) == 7e-4
        assert T.lr_at_step(2000, cfg) == 1e-7 + 0.5 * (7e-4 - 1e-7)

    def test_finetune_anchor(self):
        cfg = load_config(preset_path("paper_finetune")).optim
        assert T.lr_at_step(240, cfg) == 0.0002
        assert T.lr_at_step(0, cfg) == 1e-7

    def test_monotone_warmup(self):
        cfg = OptimizerConfig(peak_lr=1e-3, warmup_steps=10)
        lrs = [T.lr_at_step(s, cfg) for s in range(11)]
        assert all(a < b for a, b in zip(lrs, lrs[1:]))

    def test_decay(self):
        cfg = OptimizerConfig(peak_lr=1e-3, warmup_steps=100, decay="inverse_sqrt")
        assert T.lr_at_step(400, cfg) == pytest.approx(5e-4, rel=1e-15)
        flat = OptimizerConfig(peak_lr=1e-3, warmup_steps=100, decay="none")
        assert T.lr_at_step(10_000, flat) == 1e-3

    def test_errors(self):
        with pytest.raises(ValueError):
            T.lr_at_step(-1, OptimizerConfig())
        with pytest.raises(ConfigError):
            OptimizerConfig(warmup_steps=0)
        with pytest.raises(ConfigError):
            OptimizerConfig(peak_lr=1e-8, floor_lr=1e-7)


class TestAdam:
    def test_zero_grads(self):
        p = Parameter(np.array([1.0, 2.0]), "p")
        opt = T.Adam([p])
        opt.step(1e-3)
        assert np.array_equal(p.data, np.array([1.0, 2.0], dtype=p.data.dtype))

    def test_moments_decay_without_gradient(self):
        p = Parameter(np.array([1.0]), "p")
        opt = T.Adam([p])
        opt.m["p"][...] = 0.5
        opt.v["p"][...] = 0.25
        opt.step(1e-3)
        assert opt.m["p"][0] == pytest.approx(0.45)
        assert opt.v["p"][0] == pytest.approx(0.245)

    def test_first_step_is_minus_lr(self):
        with nx.precision(64):
            p = Parameter(np.array([0.3]), "p")
            p.grad[...] = 1.0
            T.Adam([p], eps=0.0).step(0.01)
            assert p.data[0] == pytest.approx(0.3 - 0.01, abs=1e-15)

    def test_frozen_untouched(self):
        frozen = Parameter(np.ones(3), "f", trainable=False)
        frozen.grad[...] = 5.0
        live = Parameter(np.ones(3), "l")
        live.grad[...] = 5.0
        T.Adam([frozen, live]).step(0.1)
        assert np.all(frozen.data == 1.0) and np.all(live.data < 1.0)
        assert "f" not in T.Adam([frozen]).m

    def test_nan_in_debug_mode(self):
        p = Parameter(np.ones(2), "p")
        p.grad[...] = np.nan
        nx.set_debug(True)
        with pytest.raises(nx.NumericError):
            T.Adam([p]).step(0.1)

    def test_adam_step_checks_params(self):
        a, b = Parameter(np.ones(1), "a"), Parameter(np.ones(1), "b")
        with pytest.raises(ValueError):
            T.adam_step([b], T.Adam([a]), 0.1)

    def test_state_round_trip(self):
        p = Parameter(np.ones(2), "p")
        opt = T.Adam([p])
        p.grad[...] = 1.0
        opt.step(0.1)
        other = T.Adam([Parameter(np.ones(2), "p")])
        other.load_state_dict(opt.state_dict())
        assert other.t == 1 and np.array_equal(other.v["p"], opt.v["p"])

    def test_clip(self):
        p = Parameter(np.zeros(2), "p")
        p.grad[...] = [3.0, 4.0]
        assert T.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(p.grad) == pytest.approx(1.0, rel=1e-6)


def copy_task(n=200, vocab_size=20, seed=0):
    vocab = D.Vocab(list(D.SPECIALS) + [f"w{i}" for i in range(vocab_size - 4)])
    gen = np.random.default_rng(seed)
    recs = []
    for _ in range(n):
        toks = tuple(int(t) for t in gen.integers(4, vocab_size, gen.integers(2, 6)))
        recs.append(D.TripletRecord(toks, toks))
    return D.TripletDataset(recs, vocab)


COPY_CFG = M.ModelConfig(d_model=32, vocab_size=20, heads=4, d_ff=64, enc_dim=8, n_latents=2,
                         vt_heads=2, vt_d_ff=32, max_len=12)


def tiny_grounded(seed=0, size=40):
    spec = D.SyntheticSpec(enc_dim=8)
    ds, store = D.generate_synthetic_grounded_corpus(seed, size, spec)
    cfg = COPY_CFG.replace(vocab_size=len(spec.vocab()))
    return ds, store, cfg


class TestTrain:
    def test_copy_task_loss_halves(self):
        ds = copy_task()
        model = M.build_base(COPY_CFG, 0)
        cfg = OptimizerConfig(peak_lr=3e-3, warmup_steps=20, decay="none", epochs=20, batch_tokens=256)
        run = T.train(model, ds, cfg, 0, "base")
        first = float(np.mean(run.losses[:5]))
        last = float(np.mean(run.losses[-5:]))
        assert run.epochs_completed == 20
        assert last <= 0.5 * first

    def test_same_seed_same_run(self):
        ds = copy_task(40)
        cfg = OptimizerConfig(peak_lr=1e-3, warmup_steps=5, epochs=2, batch_tokens=64)
        runs = [T.train(M.build_base(COPY_CFG, 1), ds, cfg, 3, "base") for _ in range(2)]
        assert runs[0].losses == runs[1].losses

    def test_freeze_invariance(self):
        ds, store, cfg = tiny_grounded()
        base = M.build_base(cfg, 0)
        before = {n: p.data.copy() for n, p in base.named_parameters().items()}
        model = M.attach_adapters(base, cfg.replace(insertion_site="both"), 1)
        ocfg = OptimizerConfig(peak_lr=1e-2, warmup_steps=2, epochs=3, batch_tokens=128)
        run = T.train(model, ds, ocfg, 0, "pretrain", store, train_cfg=TrainConfig(gate_log_every=2))
        assert run.steps > 0
        for name, p in base.named_parameters().items():
            assert np.array_equal(p.data, before[name]), name
        assert any(abs(g) > 0 for _, g, _ in M.gate_values(model))

    def test_gate_log(self):
        ds, store, cfg = tiny_grounded()
        model = M.attach_adapters(M.build_base(cfg, 0), cfg, 1)
        ocfg = OptimizerConfig(peak_lr=1e-2, warmup_steps=2, epochs=2, batch_tokens=128)
        run = T.train(model, ds, ocfg, 0, "pretrain", store, train_cfg=TrainConfig(gate_log_every=3))
        steps = [e.step for e in run.gates.entries]
        assert steps[0] == 0 and all(g[1] == 0.0 and g[2] == 0.0 for g in run.gates.entries[0].gates)
        assert steps == sorted(set(steps)) and steps[-1] == run.steps
        assert all(s % 3 == 0 for s in steps[1:-1])
        assert all(abs(g[1]) < 1 and abs(g[2]) < 1 for e in run.gates.entries for g in e.gates)

    def test_max_steps(self):
        ds = copy_task(40)
        cfg = OptimizerConfig(peak_lr=1e-3, warmup_steps=5, epochs=50, batch_tokens=64)
        run = T.train(M.build_base(COPY_CFG, 1), ds, cfg, 0, "base", train_cfg=TrainConfig(max_steps=7))
        assert run.steps == 7

    def test_mode_checks(self):
        ds, store, cfg = tiny_grounded()
        base = M.build_base(cfg, 0)
        ocfg = OptimizerConfig(epochs=1)
        with pytest.raises(ValueError):
            T.train(base, ds, ocfg, 0, "pretrain", store)
        gated = M.attach_adapters(base, cfg, 1)
        with pytest.raises(ValueError):
            T.train(gated, ds, ocfg, 0, "base", store)
        with pytest.raises(ValueError):
            T.train(gated, ds, ocfg, 0, "sideways", store)

    def test_data_errors(self):
        ds, store, cfg = tiny_grounded()
        gated = M.attach_adapters(M.build_base(cfg, 0), cfg, 1)
        ocfg = OptimizerConfig(epochs=1)
        with pytest.raises(D.DataError):
            T.train(gated, D.TripletDataset([], ds.vocab), ocfg, 0, "pretrain", store)
        partial = VisionEncodingStore.from_entries(dict(list(store.items())[:3]), store.enc_dim)
        with pytest.raises(D.DataError, match="not in the vision store"):
            T.train(gated, ds, ocfg, 0, "pretrain", partial)

    def test_finetune_selects_best_epoch(self):
        ds, store, cfg = tiny_grounded(size=30)
        valid, vstore = D.generate_synthetic_grounded_corpus(9, 10, D.SyntheticSpec(enc_dim=8))
        merged = VisionEncodingStore.from_entries(list(store.items()) + list(vstore.items()), 8)
        model = M.attach_adapters(M.build_base(cfg, 0), cfg, 1)
        ocfg = OptimizerConfig(peak_lr=5e-3, warmup_steps=2, epochs=3, batch_tokens=128)
        run = T.train(model, ds, ocfg, 0, "finetune", merged, valid=valid, train_cfg=TrainConfig(decode_max_len=10))
        assert run.selection == "best_valid" and len(run.valid_bleu) == 3
        assert run.valid_bleu[run.best_epoch - 1] == max(run.valid_bleu)
        named = model.named_parameters()
        for name, arr in run.best_state.items():
            assert np.array_equal(named[name].data, arr)

    def test_batches_respect_budget(self):
        ds = copy_task(100)
        batches = T.make_batches(ds, 40, nx.rng(0, "b"))
        assert sorted(i for b in batches for i in b) == list(range(100))
        for b in batches:
            widest = max(max(len(ds[i].src), len(ds[i].tgt)) + 1 for i in b)
            assert len(b) == 1 or widest * len(b) <= 40


class TestGateTrajectory:
    def test_steps_increase(self):
        traj = T.GateTrajectory()
        traj.append(0, 0, [(1, 0.0, 0.0)])
        with pytest.raises(ValueError):
            traj.append(0, 0, [(1, 0.0, 0.0)])

    def test_csv_round_trip(self, tmp_path):
        traj = T.GateTrajectory()
        traj.append(0, 0, [(1, 0.0, 0.0), (2, 0.0, 0.0)])
        traj.append(50, 1, [(1, math.tanh(0.013), -0.2), (2, 1e-9, 0.1234567890123)])
        traj.to_csv(tmp_path / "g.csv")
        assert (tmp_path / "g.csv").read_text().splitlines()[0] == "step,epoch,layer,gamma_a,gamma_f"
        back = T.GateTrajectory.from_csv(tmp_path / "g.csv")
        assert back.entries == traj.entries
        assert back.max_abs("a") == math.tanh(0.013) and back.max_abs("f") == 0.2

    def test_log_gates_requires_gated(self):
        with pytest.raises(ValueError):
            T.log_gates(M.build_base(COPY_CFG, 0), 0, T.GateTrajectory())

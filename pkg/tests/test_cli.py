import json

import numpy as np
import pytest

from gram_mmt import datapipe as D
from gram_mmt import evaluation as E
from gram_mmt import model as M
from gram_mmt.cli import main
from gram_mmt.config import load_config
from gram_mmt.io import checkpoint_load, checkpoint_save
from gram_mmt.trainer import GateTrajectory

TOY = """
[model]
d_model = 16
heads = 2
d_ff = 32
enc_dim = 8
n_latents = 2
resampler_depth = 1
vt_heads = 2
vt_d_ff = 16
max_len = 16

[optim]
peak_lr = 0.005
warmup_steps = 5
decay = "none"
epochs = 2
batch_tokens = 160

[train]
gate_log_every = 5
decode_max_len = 10
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.toml").write_text(TOY)
    cfg = str(root / "run.toml")
    assert main(["synth-corpus", "--config", cfg, "--seed", "1", "--size", "80", "--out", str(root / "syn")]) == 0
    lines = (root / "syn" / "triplets.jsonl").read_text().splitlines(keepends=True)
    (root / "train.jsonl").write_text("".join(lines[:60]))
    (root / "valid.jsonl").write_text("".join(lines[60:]))
    assert main(["synth-corpus", "--config", cfg, "--seed", "1", "--size", "80", "--control",
                 "--out", str(root / "ctl")]) == 0
    common = ["--config", cfg, "--vocab", str(root / "syn" / "vocab.txt"), "--images", str(root / "syn" / "images.vstr")]
    assert main(["train-base", *common, "--train", str(root / "ctl" / "triplets.jsonl"),
                 "--images", str(root / "ctl" / "images.vstr"), "--out", str(root / "base")]) == 0
    return root, cfg, common


def test_train_base_run_directory(workspace):
    root, _, _ = workspace
    run = root / "base"
    for name in ("model.ckpt", "losses.csv", "config.toml", "seed", "run.json"):
        assert (run / name).exists(), name
    assert (run / "seed").read_text().strip() == "13"
    snap = load_config(run / "config.toml")
    assert snap.paths.train.endswith("ctl/triplets.jsonl") and snap.model.vocab_size == len(D.Vocab.load(
        root / "syn" / "vocab.txt"))
    assert not (run / "gates.csv").exists()


def test_pretrain_then_finetune(workspace, capsys):
    root, _, common = workspace
    base = str(root / "base" / "model.ckpt")
    assert main(["pretrain", *common, "--train", str(root / "train.jsonl"), "--init", base,
                 "--out", str(root / "pre")]) == 0
    gates = GateTrajectory.from_csv(root / "pre" / "gates.csv")
    assert gates.entries[0].step == 0 and gates.max_abs("a") > 0
    before = checkpoint_load(base)
    pre = checkpoint_load(root / "pre" / "model.ckpt")
    for name, p in before.named_parameters().items():
        assert np.array_equal(pre.named_parameters()[name].data, p.data)

    capsys.readouterr()
    assert main(["finetune", *common, "--train", str(root / "train.jsonl"), "--valid", str(root / "valid.jsonl"),
                 "--init", str(root / "pre" / "model.ckpt"), "--out", str(root / "ft")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["selection"] == "best_valid" and summary["best_epoch"] in (1, 2)
    assert len(summary["valid_bleu"]) == 2


def test_direct_train_insertion_site(workspace):
    root, _, common = workspace
    assert main(["direct-train", *common, "--train", str(root / "train.jsonl"), "--init",
                 str(root / "base" / "model.ckpt"), "--insertion-site", "both", "--max-steps", "3",
                 "--out", str(root / "direct")]) == 0
    model = checkpoint_load(root / "direct" / "model.ckpt")
    assert model.config.insertion_site == "both" and len(model.adapters) == 4


@pytest.fixture(scope="module")
def gate_zero(workspace):
    root, _, _ = workspace
    base = checkpoint_load(root / "base" / "model.ckpt")
    model = M.attach_adapters(base, base.config, 3)
    checkpoint_save(model, root / "zero.ckpt")
    vocab = D.Vocab.load(root / "syn" / "vocab.txt")
    ids = sorted(D.read_triplets(root / "train.jsonl", vocab).image_ids())
    enc = lambda *w: tuple(vocab.encode(w))
    insts = [E.CommuteInstance(enc("a", "<unk>", "is", "near", "the", "road"),
                               ((ids[0], enc("ein", "hund")), (ids[1], enc("ein", "auto")))),
             E.CommuteInstance(enc("the", "beach", "has", "a", "<unk>"),
                               ((ids[2], enc("der", "strand", "hat", "ein", "boot")), (ids[3], enc("katze"))))]
    E.write_commute(insts, vocab, root / "commute.jsonl")
    return root / "zero.ckpt"


@pytest.mark.parametrize("regime", E.REGIMES)
def test_evaluate_gate_zero_commute(workspace, gate_zero, regime):
    root, _, common = workspace
    out = root / f"report_{regime}.json"
    assert main(["evaluate", *common, "--checkpoint", str(gate_zero), "--test", str(root / "valid.jsonl"),
                 "--commute", str(root / "commute.jsonl"), "--regime", regime, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["commute"] == 0.5 and report["regime"] == regime and "valid" in report["bleu"]


def test_decode_byte_identical(workspace):
    root, _, common = workspace
    args = ["decode", *common, "--checkpoint", str(root / "pre" / "model.ckpt"), "--input", str(root / "valid.jsonl")]
    assert main([*args, "--out", str(root / "h1.txt")]) == 0
    assert main([*args, "--out", str(root / "h2.txt")]) == 0
    assert (root / "h1.txt").read_bytes() == (root / "h2.txt").read_bytes()
    assert len((root / "h1.txt").read_text().splitlines()) == 20


def test_gates_export(workspace):
    root, _, common = workspace
    assert main(["gates-export", *common, "--checkpoint", str(root / "pre" / "model.ckpt"),
                 "--out", str(root / "g.csv")]) == 0
    traj = GateTrajectory.from_csv(root / "g.csv")
    final = GateTrajectory.from_csv(root / "pre" / "gates.csv").entries[-1]
    assert traj.entries[0].gates == final.gates and traj.entries[0].step == final.step


def test_param_count_explain(workspace, capsys):
    _, cfg, _ = workspace
    assert main(["param-count", "--config", cfg, "--trainable"]) == 0
    trainable = int(capsys.readouterr().out.strip())
    assert main(["param-count", "--config", cfg, "--explain"]) == 0
    lines = capsys.readouterr().out.splitlines()
    explained = int(next(l for l in lines if l.startswith("trainable")).split()[-1].replace(",", ""))
    assert trainable == explained
    assert int(lines[-1]) == int(next(l for l in lines if l.startswith("total")).split()[-1].replace(",", ""))


def test_collation_commands(workspace, tmp_path, capsys):
    root, cfg, common = workspace
    (tmp_path / "phrases.txt").write_text("the road\n")
    capsys.readouterr()
    assert main(["collate-pretrain", *common, "--captions", str(root / "ctl" / "triplets.jsonl"),
                 "--phrases", str(tmp_path / "phrases.txt"), "--out", str(tmp_path / "cr.jsonl")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["fully_masked"] == 80 and 0 < stats["masked"] < 80
    assert stats["total"] == len((tmp_path / "cr.jsonl").read_text().splitlines())
    assert main(["collate-finetune", *common, "--input", str(root / "train.jsonl"), "--out",
                 str(tmp_path / "ft.jsonl")]) == 0
    assert len((tmp_path / "ft.jsonl").read_text().splitlines()) == 120


def test_build_vocab(workspace, tmp_path):
    root, cfg, _ = workspace
    assert main(["build-vocab", "--config", cfg, "--input", str(root / "ctl" / "triplets.jsonl"),
                 "--out", str(tmp_path / "v.txt")]) == 0
    vocab = D.Vocab.load(tmp_path / "v.txt")
    assert vocab.itos[:4] == list(D.SPECIALS) and "auto" in vocab


class TestExitCodes:
    def test_usage(self, workspace, capsys):
        _, cfg, _ = workspace
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--config", cfg])
        assert exc.value.code == 1
        assert main(["param-count", "--config", "/nonexistent.toml"]) == 1
        assert main(["pretrain", "--config", cfg, "--vocab", "x"]) in (1, 2)

    def test_unknown_config_key(self, tmp_path, capsys):
        (tmp_path / "c.toml").write_text("[optim]\nleraning_rate = 1\n")
        assert main(["param-count", "--config", str(tmp_path / "c.toml")]) == 1
        assert "leraning_rate" in capsys.readouterr().err

    def test_data_error(self, workspace, tmp_path, capsys):
        root, _, common = workspace
        (tmp_path / "bad.jsonl").write_text('{"src": "a", "tgt": "b"}\n{"src": \n')
        assert main(["train-base", *common, "--train", str(tmp_path / "bad.jsonl"), "--out",
                     str(tmp_path / "r")]) == 2
        err = capsys.readouterr().err.strip()
        assert err.count("\n") == 0 and "bad.jsonl:2:" in err

    def test_missing_image(self, workspace, tmp_path):
        root, _, common = workspace
        other = ["--images", str(root / "ctl" / "images.vstr")]
        (tmp_path / "t.jsonl").write_text('{"src": "a", "tgt": "ein", "images": ["nope"]}\n')
        assert main(["pretrain", *common, *other, "--train", str(tmp_path / "t.jsonl"), "--init",
                     str(root / "base" / "model.ckpt"), "--out", str(tmp_path / "r")]) == 2

    def test_numeric_error(self, workspace, tmp_path):
        root, _, common = workspace
        base = checkpoint_load(root / "base" / "model.ckpt")
        base.tokens.data[...] = np.nan
        checkpoint_save(base, tmp_path / "nan.ckpt")
        assert main(["pretrain", *common, "--train", str(root / "train.jsonl"), "--init", str(tmp_path / "nan.ckpt"),
                     "--debug-nan", "--out", str(tmp_path / "r")]) == 3

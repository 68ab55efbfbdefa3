"""Command-line entry point: ``gram-mmt <command> --config PATH [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import datapipe as D
from . import evaluation as E
from . import model as M
from . import numerics as nx
from . import trainer as T
from .config import ConfigError, RunConfig, load_config, save_config
from .io import (CheckpointError, MissingImageError, StoreError, checkpoint_read, checkpoint_save, store_read,
                 store_write)

log = logging.getLogger("gram_mmt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_COMMANDS = {"train-base": "base", "pretrain": "pretrain", "finetune": "finetune", "direct-train": "direct"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ----------------------------------------------------------------

def _need(value, what: str) -> str:
    if not value:
        raise UsageError(f"{what} is required (flag or config [paths])")
    return value


def _vocab(cfg: RunConfig, args) -> D.Vocab:
    return D.Vocab.load(_need(getattr(args, "vocab", None) or cfg.paths.vocab, "vocab"))


def _store(cfg: RunConfig, args, required: bool = True):
    path = getattr(args, "images", None) or cfg.paths.images
    if not path:
        if required:
            raise UsageError("a vision store is required (--images or paths.images)")
        return None
    return store_read(path)


def _model_config(cfg: RunConfig, args, vocab: D.Vocab | None = None) -> M.ModelConfig:
    mc = cfg.model
    if vocab is not None and mc.vocab_size != len(vocab):
        log.info("model.vocab_size %d replaced by vocabulary size %d", mc.vocab_size, len(vocab))
        mc = mc.replace(vocab_size=len(vocab))
    if getattr(args, "insertion_site", None):
        mc = mc.replace(insertion_site=args.insertion_site)
    return mc


def _load_checkpoint(path):
    ck = checkpoint_read(_need(path, "checkpoint"))
    return ck.model, ck


def _write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, repr(float(loss))])


# --- data commands ----------------------------------------------------------

def cmd_build_vocab(cfg, args):
    lines = []
    for path in args.input:
        for src, tgt, _ in D.read_triplet_text(path, raw=args.raw):
            lines.append(" ".join(src))
            lines.append(" ".join(tgt))
    vocab = D.build_vocab(lines, args.max_size, raw=False)
    out = Path(_need(args.out, "--out"))
    vocab.save(out)
    print(f"wrote {len(vocab)} tokens to {out}")


def _read(path, vocab, raw):
    return D.read_triplets(path, vocab, raw=raw)


def cmd_collate_pretrain(cfg, args):
    vocab = _vocab(cfg, args)
    captions = _read(_need(args.captions, "--captions"), vocab, args.raw)
    phrases = D.load_phrases(_need(args.phrases or cfg.paths.phrases, "phrases"))
    textonly_path = args.textonly or cfg.paths.textonly
    textonly = _read(textonly_path, vocab, args.raw) if textonly_path else None
    out = D.collate_pretrain(captions, phrases, textonly)
    D.write_triplets(out, _need(args.out, "--out"))
    print(json.dumps(out.stats.as_dict(), sort_keys=True))


def cmd_collate_finetune(cfg, args):
    vocab = _vocab(cfg, args)
    triplets = _read(_need(args.input, "--input"), vocab, args.raw)
    phrases = ()
    if args.masked:
        phrases = D.load_phrases(_need(args.phrases or cfg.paths.phrases, "phrases"))
    out = D.collate_finetune(triplets, args.masked, phrases)
    if args.textonly or cfg.paths.textonly:
        out = D.concat_datasets(out, _read(args.textonly or cfg.paths.textonly, vocab, args.raw))
    D.write_triplets(out, _need(args.out, "--out"))
    print(json.dumps(out.stats.as_dict(), sort_keys=True))


def cmd_synth_corpus(cfg, args):
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    spec = D.SyntheticSpec(enc_dim=cfg.model.enc_dim)
    ds, store = D.generate_synthetic_grounded_corpus(args.seed, args.size, spec, masked=not args.control)
    ds.vocab.save(out / "vocab.txt")
    D.write_triplets(ds, out / "triplets.jsonl")
    store_write(out / "images.vstr", store)
    print(f"wrote {len(ds)} triplets, {len(store)} image encodings to {out}")


# --- training ---------------------------------------------------------------

def _initial_model(cfg: RunConfig, args, mode: str, vocab: D.Vocab):
    if mode == "base":
        return M.build_base(_model_config(cfg, args, vocab), args.seed)
    init = args.init or cfg.paths.init_checkpoint
    model, _ = _load_checkpoint(_need(init, f"{mode} needs --init (or paths.init_checkpoint)"))
    if mode == "finetune":
        if not M.is_gated(model):
            raise UsageError("finetune starts from a gated (pretrained) checkpoint")
        return model
    if M.is_gated(model):
        model = M.base_of(model)
    mc = model.config.replace(**{k: v for k, v in cfg.model.to_dict().items()
                                 if k in ("enc_dim", "n_latents", "resampler_depth", "vt_heads", "vt_d_ff",
                                          "insertion_site")})
    if args.insertion_site:
        mc = mc.replace(insertion_site=args.insertion_site)
    return M.attach_adapters(model, mc, args.seed)


def cmd_train(cfg, args):
    mode = TRAIN_COMMANDS[args.command]
    vocab = _vocab(cfg, args)
    train_path = _need(args.train or cfg.paths.train, "training data (--train or paths.train)")
    dataset = _read(train_path, vocab, args.raw)
    model = _initial_model(cfg, args, mode, vocab)
    if model.config.vocab_size != len(vocab):
        raise UsageError(f"checkpoint vocabulary size {model.config.vocab_size} != vocab file size {len(vocab)}")
    store = _store(cfg, args, required=mode != "base" or bool(dataset.image_ids()))
    valid_path = args.valid or cfg.paths.valid
    valid = _read(valid_path, vocab, args.raw) if valid_path else None
    if args.debug_nan:
        cfg.train.debug_nan = True
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps

    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    # the snapshot records every input actually used, so the run directory alone reproduces the run
    cfg.model = model.config
    resolved = {"vocab": args.vocab or cfg.paths.vocab, "train": train_path, "valid": valid_path,
                "images": args.images or cfg.paths.images, "init_checkpoint": args.init or cfg.paths.init_checkpoint}
    for key, val in resolved.items():
        setattr(cfg.paths, key, str(Path(val).resolve()) if val else "")
    save_config(cfg, out / "config.toml")
    (out / "seed").write_text(f"{args.seed}\n")

    def on_epoch_end(epoch, run, opt):
        if args.save_every_epoch:
            checkpoint_save(model, out / f"epoch{epoch:03d}.ckpt", opt.state_dict(), {"seed": args.seed},
                            {"mode": mode, "epoch": epoch, "step": opt.t})

    opt = T.Adam.from_config(model.parameters(), cfg.optim)
    run = T.train(model, dataset, cfg.optim, args.seed, mode, store, valid, cfg.train, on_epoch_end, opt)
    meta = {"mode": mode, "epoch": run.best_epoch, "step": run.steps, "selection": run.selection,
            "train": str(Path(train_path).resolve())}
    checkpoint_save(model, out / "model.ckpt", opt.state_dict(), {"seed": args.seed}, meta)
    _write_losses(out / "losses.csv", run.losses)
    if M.is_gated(model):
        run.gates.to_csv(out / "gates.csv")
    summary = {"mode": mode, "seed": args.seed, "steps": run.steps, "epochs": run.epochs_completed,
               "selection": run.selection, "best_epoch": run.best_epoch, "valid_bleu": run.valid_bleu,
               "final_loss": run.losses[-1]}
    (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


# --- evaluation -------------------------------------------------------------

def cmd_evaluate(cfg, args):
    model, _ = _load_checkpoint(args.checkpoint)
    vocab = _vocab(cfg, args)
    tests = args.test or ([cfg.paths.test] if cfg.paths.test else [])
    testsets = {Path(p).stem: _read(p, vocab, args.raw) for p in tests}
    commute_path = args.commute or cfg.paths.commute
    commute = E.read_commute(commute_path, vocab, args.raw) if commute_path else None
    if not testsets and not commute:
        raise UsageError("nothing to evaluate: give --test and/or --commute")
    store = None if args.regime == "text_only" else _store(cfg, args)
    report = E.evaluate(model, testsets, args.regime, args.seed, store, commute,
                        cfg.train.decode_max_len, cfg.train.beam)
    if args.out:
        report.save(args.out)
    print(report.to_json())


def cmd_decode(cfg, args):
    model, _ = _load_checkpoint(args.checkpoint)
    vocab = _vocab(cfg, args)
    ds = _read(_need(args.input, "--input"), vocab, args.raw)
    ids = E.regime_image_ids(ds, args.regime, args.seed) if args.regime != "text_only" else [() for _ in ds]
    store = _store(cfg, args) if any(ids) else None
    hyps = E.translate(model, ds, ids, store, cfg.train.decode_max_len, cfg.train.beam)
    text = "".join(" ".join(vocab.decode(h)) + "\n" for h in hyps)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_gates_export(cfg, args):
    model, ck = _load_checkpoint(args.checkpoint)
    if not M.is_gated(model):
        raise UsageError("checkpoint has no gates (base model)")
    traj = T.GateTrajectory()
    traj.append(int(ck.meta.get("step", 0)), int(ck.meta.get("epoch") or 0), M.gate_values(model))
    out = Path(_need(args.out, "--out"))
    traj.to_csv(out)
    print(f"wrote {len(traj.entries[0].gates)} layers to {out}")


def cmd_param_count(cfg, args):
    mc = _model_config(cfg, args)
    gated = not args.base
    if args.checkpoint:
        model, _ = _load_checkpoint(args.checkpoint)
        mc, gated = model.config, M.is_gated(model)
    else:
        model = M.build_base(mc, args.seed)
        if gated:
            model = M.attach_adapters(model, mc, args.seed)
    count = M.count_parameters(model, trainable_only=args.trainable)
    if args.explain:
        parts = M.parameter_breakdown(mc, gated)
        for name, n in parts.items():
            frozen = gated and name in M.BASE_COMPONENTS
            print(f"{name:20s} {n:>14,d}{'  (frozen)' if frozen else ''}")
        print(f"{'total':20s} {M.expected_parameter_count(mc, gated):>14,d}")
        print(f"{'trainable':20s} {M.expected_parameter_count(mc, gated, trainable_only=True):>14,d}")
    print(count)


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run configuration (TOML)")
    common.add_argument("--seed", type=int, default=13)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--vocab", help="vocabulary file (overrides paths.vocab)")
    common.add_argument("--images", help="vision encoding store (overrides paths.images)")
    common.add_argument("--raw", action="store_true", help="input text is untokenized")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="gram-mmt", description="Gated multimodal translation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("build-vocab", parents=[common], help="word vocabulary from triplet files")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--max-size", type=int, default=32000)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("collate-pretrain", parents=[common], help="masked + fully-masked + text-only mixture")
    p.add_argument("--captions")
    p.add_argument("--phrases")
    p.add_argument("--textonly")
    p.set_defaults(func=cmd_collate_pretrain)

    p = sub.add_parser("collate-finetune", parents=[common], help="with-image and image-stripped copies")
    p.add_argument("--input")
    p.add_argument("--masked", action="store_true")
    p.add_argument("--phrases")
    p.add_argument("--textonly", help="optional text-only corpus appended after collation")
    p.set_defaults(func=cmd_collate_finetune)

    p = sub.add_parser("synth-corpus", parents=[common], help="synthetic grounded corpus")
    p.add_argument("--size", type=int, default=2000)
    p.add_argument("--control", action="store_true", help="leave the object word unmasked")
    p.set_defaults(func=cmd_synth_corpus)

    for name in TRAIN_COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"train in {TRAIN_COMMANDS[name]} mode")
        p.add_argument("--train")
        p.add_argument("--valid")
        p.add_argument("--init", help="starting checkpoint (base for pretrain/direct, gated for finetune)")
        p.add_argument("--insertion-site", choices=M.INSERTION_SITES)
        p.add_argument("--max-steps", type=int)
        p.add_argument("--debug-nan", action="store_true")
        p.add_argument("--save-every-epoch", action="store_true")
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="BLEU4 and contrastive score")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", nargs="*")
    p.add_argument("--commute")
    p.add_argument("--regime", choices=E.REGIMES, default="multimodal")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("decode", parents=[common], help="greedy translations, one per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input")
    p.add_argument("--regime", choices=E.REGIMES, default="multimodal")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("gates-export", parents=[common], help="gate values of a checkpoint as CSV")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_gates_export)

    p = sub.add_parser("param-count", parents=[common], help="parameter counts")
    p.add_argument("--trainable", action="store_true")
    p.add_argument("--explain", action="store_true", help="print the closed-form breakdown")
    p.add_argument("--base", action="store_true", help="count the text-only model")
    p.add_argument("--checkpoint")
    p.add_argument("--insertion-site", choices=M.INSERTION_SITES)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"gram-mmt {args.command}: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"gram-mmt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except nx.NumericError as exc:
        print(f"gram-mmt {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, StoreError, CheckpointError, MissingImageError, OSError) as exc:
        print(f"gram-mmt {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

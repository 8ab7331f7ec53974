"""Command-line entry points: simulate, train, eval, explain.

Exit codes: 0 ok, 2 configuration or usage error, 3 lookup error,
4 numeric divergence during training.
"""
from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import iit, runtime
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_config
from .decisions import DET, TRACK
from .frames import read_dataset
from .prepare import teacher_forced
from .sim import generate_dataset

EXIT_OK, EXIT_CONFIG, EXIT_LOOKUP, EXIT_DIVERGED = 0, 2, 3, 4
TRACE_FILE = "trace.tsv"
CONFIG_FILE = "config.json"


class LookupFailure(LookupError):
    pass


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty (pass --force to overwrite)")
        shutil.rmtree(path) if path.is_dir() else path.unlink()
    path.mkdir(parents=True, exist_ok=True)


def _dataset(path: str):
    d = Path(path)
    if not (d / "manifest.json").is_file():
        raise LookupFailure(f"no dataset manifest in {d}")
    return read_dataset(d)


def _load_run(path: str) -> tuple[Checkpoint, RunConfig]:
    d = Path(path)
    if not (d / "manifest.json").is_file():
        raise LookupFailure(f"no checkpoint in {d}")
    ck = load_checkpoint(d)
    return ck, from_dict(json.loads((d / CONFIG_FILE).read_text()))


def _probe_set(ck: Checkpoint, cfg: RunConfig) -> iit.ProbeSet:
    alignment = iit.default_alignment(cfg.net.hidden_dim, cfg.scm.matches_any)
    probes = iit.ProbeSet(alignment, store=ck.probes)
    probes.trained = ck.probes_trained
    return probes


# ------------------------------------------------------------------ commands

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and args.force:
        shutil.rmtree(out)
    manifest = generate_dataset(cfg, out, threads=args.threads, force=args.force)
    print(f"wrote {manifest['n_sequences']} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = _dataset(args.data)
    if len(dataset) < 2:
        raise ConfigError("data", "at least two sequences are needed for a train / held-out split")
    trainer = iit.Trainer(cfg, dataset, log=None if args.quiet else print)
    if args.resume:
        ck, saved = _load_run(args.resume)
        if saved.net != cfg.net:
            raise ConfigError("net", "differs from the checkpoint being resumed")
        state = iit.TrainState(ck.params, _probe_set(ck, cfg), ck.epoch, ck.step,
                               iit.read_trace(Path(args.resume) / TRACE_FILE))
    else:
        state = trainer.init_state()
    epochs = cfg.train.epochs if args.epochs is None else args.epochs
    out = Path(args.out)
    if not (args.resume and out.resolve() == Path(args.resume).resolve()):
        _prepare_out(out, args.force)
    trainer.run(state, epochs)
    meta = {"train_ids": trainer.train_ids, "holdout_ids": trainer.holdout_ids, "config_hash": cfg.digest()}
    save_checkpoint(Checkpoint(cfg.net, state.params, state.probes.store, state.epoch, state.step,
                               state.probes.trained, meta), out)
    (out / CONFIG_FILE).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    iit.write_trace(out / TRACE_FILE, state.trace)
    print(f"epoch {state.epoch} step {state.step} -> {out}")
    return EXIT_OK


def _seq_ids(ck: Checkpoint, split: str, n: int) -> list[int]:
    if split == "all":
        return list(range(n))
    ids = [i for i in ck.meta.get(f"{split}_ids", []) if i < n]
    if not ids:
        raise LookupFailure(f"no {split} sequences in this dataset")
    return ids


def cmd_eval(args) -> int:
    ck, cfg = _load_run(args.checkpoint)
    dataset = _dataset(args.data)
    net = iit.make_net(cfg)
    probes = _probe_set(ck, cfg)
    ids = _seq_ids(ck, args.split, len(dataset))
    report, records = runtime.evaluate(cfg, net, ck.params, probes, dataset, ids, probes.alignment,
                                       oracle=args.oracle, with_iia=not args.no_iia,
                                       free_run=not args.no_free_run)
    report["sequences"] = ids
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.results:
        with open(args.results, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return EXIT_OK


def parse_subject(text: str) -> tuple[str, int]:
    side, _, num = text.partition(":")
    if side not in (DET, TRACK) or not num.lstrip("-").isdigit():
        raise ConfigError("subject", f"expected '{DET}:<index>' or '{TRACK}:<identity>', got {text!r}")
    return side, int(num)


def cmd_explain(args) -> int:
    ck, cfg = _load_run(args.checkpoint)
    dataset = _dataset(args.data)
    subject = parse_subject(args.subject)
    if not 0 <= args.seq < len(dataset):
        raise LookupFailure(f"sequence {args.seq} not in dataset")
    frames = dataset[args.seq]
    if not 0 <= args.frame < len(frames):
        raise LookupFailure(f"frame {args.frame} not in sequence {args.seq}")
    net = iit.make_net(cfg)
    probes = _probe_set(ck, cfg)
    prepared = teacher_forced(net, ck.params, dataset, [args.seq])
    pf = prepared[0][args.frame]
    records = runtime.evaluate_frames(net, ck.params, [[pf]], probes, cfg.scm.matches_any)
    rec = next((r for r in records if r.subject == subject), None)
    if rec is None:
        raise LookupFailure(f"subject {args.subject} not in frame {args.frame} of sequence {args.seq}")
    out = {"seq": args.seq, "t": args.frame, **rec.trace.to_dict(),
           "flag": runtime.uncertainty_flag(rec.trace), "partner": rec.partner}
    sys.stdout.write(json.dumps(out, sort_keys=True) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iitrack", description="Causally-aligned tracking-by-detection toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="cap on worker processes")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train a tracker network")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--epochs", type=int, help="train until this many epochs in total")
    t.add_argument("--force", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="report path (default: stdout)")
    e.add_argument("--results", help="per-subject results (one JSON object per line)")
    e.add_argument("--split", choices=("holdout", "train", "all"), default="holdout")
    e.add_argument("--oracle", action="store_true", help="score decisions with the oracle instead of the network")
    e.add_argument("--no-iia", action="store_true")
    e.add_argument("--no-free-run", action="store_true")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("explain", parents=[common], help="explanation trace for one decision")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--seq", type=int, required=True)
    x.add_argument("--frame", type=int, required=True)
    x.add_argument("--subject", required=True, help=f"'{DET}:<index>' or '{TRACK}:<identity>'")
    x.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LookupFailure, FileNotFoundError) as exc:
        print(f"lookup error: {exc}", file=sys.stderr)
        return EXIT_LOOKUP
    except iit.TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""``stead`` command line: train, eval, bench, inspect, generate.

Every failure exits nonzero after printing one line ``<ErrorClass>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

from .attention import attention_scaling_probe, write_probe_csv
from .config import KEY_ALIASES, RunConfig
from .data import ANOMALY_KINDS, DEFAULT_SHAPE, generate_synthetic, load_manifest
from .errors import ConfigError
from .model import REFERENCE_PARAM_COUNTS, PRESETS, param_breakdown
from .metrics import auc_roc
from .train import Model, score_clip_files, score_table, train


@contextmanager
def _output(path: str | None):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {k: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    run = run.with_overrides({k[4:]: v for k, v in overrides.items()}, "command line")
    result = train(run)
    print(f"steps = {result.steps}")
    print(f"train_auc = {result.train_auc!r}")
    if result.test_auc is not None:
        print(f"test_auc = {result.test_auc!r}")
    print(f"checkpoint = {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, _ = Model.from_checkpoint(args.checkpoint)
    if args.clips:
        _write_scores(score_clip_files(model, args.clips), args.out)
        return 0
    if not args.manifest:
        raise ConfigError("eval needs --manifest or --clips")
    rows = score_table(model, load_manifest(args.manifest))
    _write_scores(rows, args.out)
    # after the table, so single-class manifests still get their scores
    auc = auc_roc([r[2] for r in rows], [r[1] for r in rows])
    print(f"auc = {auc!r}", file=sys.stderr if args.out in (None, "-") else sys.stdout)
    return 0


def _write_scores(rows, out) -> None:
    with _output(out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "label", "score"))
        for ident, label, score in rows:
            w.writerow((ident, label, repr(score)))


def cmd_bench(args) -> int:
    rows = attention_scaling_probe(list(args.L), args.m, args.C, args.reps, warmup=args.warmup, seed=args.seed)
    with _output(args.out) as fh:
        write_probe_csv(rows, fh)
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        _, run = Model.from_checkpoint(args.checkpoint)
        cfg, label = run.model_config(), str(args.checkpoint)
    else:
        cfg, label = PRESETS[args.preset], f"preset {args.preset}"
    rows = param_breakdown(cfg)
    width = max(len(r[0]) for r in rows)
    print(f"# {label}")
    print(f"{'name':<{width}}  {'shape':<20}  count")
    for name, shape, count in rows:
        print(f"{name:<{width}}  {str(shape):<20}  {count}")
    total = sum(r[2] for r in rows)
    print(f"{'total':<{width}}  {'':<20}  {total}")
    print(f"reference totals: fast {REFERENCE_PARAM_COUNTS['fast']}, base {REFERENCE_PARAM_COUNTS['base']}")
    return 0


def cmd_generate(args) -> int:
    m = generate_synthetic(
        args.out, args.n_normal, args.n_abnormal, args.shape, args.seed, args.kind, split=args.split
    )
    print(f"wrote {len(m)} clips and {Path(args.out) / (args.split + '.manifest')}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stead", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", help="key = value run config file")
    inverse = {v: k for k, v in KEY_ALIASES.items()}
    for f in fields(RunConfig):
        key = inverse.get(f.name, f.name)
        flags = dict.fromkeys((f"--{key.replace('_', '-')}", f"--{key}"))
        p.add_argument(*flags, dest=f"cfg_{key}", metavar="VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score clips with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--clips", nargs="+", help="score separate clip files (e.g. one video) instead")
    p.add_argument("--out", help="CSV path for id,label,score (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time exact vs linear attention")
    p.add_argument("--L", type=_ints, default=(400, 800, 1600, 3200))
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--C", type=int, default=64)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="per-layer parameter counts")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(PRESETS), default="fast")
    g.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int, default=100)
    p.add_argument("--n-abnormal", type=int, default=100)
    p.add_argument("--shape", type=_ints, default=DEFAULT_SHAPE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=ANOMALY_KINDS, default=ANOMALY_KINDS[0])
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parseable line
        msg = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``elecrec`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

from . import data
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_run_config
from .experiments import SWEEP_PARAMS, load_data, parse_grid, run_sweep, train_to_dir, write_sweep_csv
from .metrics import evaluate_split
from .train import HISTORY_COLUMNS, HistoryRow, history_csv

log = logging.getLogger("elecrec")


class UsageError(Exception):
    """Bad flags or inputs that the user must fix (exit code 2)."""


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _run_config(args):
    overrides = _overrides(args.set)
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if not os.path.isfile(args.config):
        raise UsageError(f"config file {args.config!r} not found")
    run = load_run_config(args.config, overrides)
    if not run.data_dir:
        raise UsageError("no data path: set data_dir in the config or pass --data-dir")
    if not os.path.isdir(run.data_dir):
        raise UsageError(f"data directory {run.data_dir!r} does not exist")
    return run


def cmd_synth(args) -> int:
    if args.users < 10 or args.items < 10:
        raise UsageError("--users and --items must be at least 10")
    if not 0.0 <= args.noise < 1.0:
        raise UsageError("--noise must lie in [0, 1)")
    if not 1 <= args.min_len <= args.max_len:
        raise UsageError("need 1 <= --min-len <= --max-len")
    seqs = data.synth_generate(args.users, args.items, args.seed, args.noise, args.min_len, args.max_len)
    data.write_dataset(seqs, args.out)
    print(f"wrote {len(seqs)} users to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    if not os.path.isfile(args.input):
        raise UsageError(f"input file {args.input!r} not found")
    seqs, vocab = data.load_dataset(args.input, args.min_count, not args.single_pass)
    split = data.leave_one_out_split(seqs, num_items=len(vocab))
    split.vocab = vocab
    data.save_split(split, args.out)
    print(f"{split.num_users} users, {split.num_items} items -> {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    split = load_data(run.data_dir)
    result = train_to_dir(split, run.train, run.out_dir, run.data_dir)
    print(f"variant: {run.train.variant}  best epoch: {result.best_epoch}")
    print(result.best_valid.summary())
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data_dir = args.data_dir or meta.get("data_dir")
    if not data_dir or not os.path.isdir(data_dir):
        raise UsageError(f"data directory {data_dir!r} not found; pass --data-dir")
    split = load_data(data_dir)
    report = evaluate_split(model, split, args.split, exclude_seen=args.exclude_seen)
    print(report.summary())
    target = args.csv or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "history.csv")
    fresh = not os.path.exists(target)
    row = HistoryRow(int(meta.get("best_epoch", 0)), args.split, report, None, None, None)
    with open(target, "a") as fh:
        fh.write(history_csv([row], header=fresh))
    return 0


def cmd_sweep(args) -> int:
    run = _run_config(args)
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    split = load_data(run.data_dir)
    rows = run_sweep(split, run.train, args.param, grid, args.parallel)
    out = args.out or os.path.join(run.out_dir, f"sweep_{args.param}.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_sweep_csv(rows, args.param, out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    for value, metrics in rows:
        w.writerow([f"{value:g}"] + [f"{m:.4f}" for m in metrics])
    print(f"sweep written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elecrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic Markov-chain corpus")
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-len", type=int, default=10)
    s.add_argument("--max-len", type=int, default=40)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="filter, remap and split a raw interaction file")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-count", type=int, default=5)
    s.add_argument("--single-pass", action="store_true", help="apply the k-core filter once instead of to a fixed point")
    s.set_defaults(func=cmd_prepare)

    def run_flags(s):
        s.add_argument("--config", required=True)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        s.add_argument("--data-dir")
        s.add_argument("--out-dir")

    s = sub.add_parser("train", help="train one model")
    run_flags(s)
    s.add_argument("--variant", choices=["elecrec", "elecrec_es", "elecrec_fs", "generator_only", "sequential_bce"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["valid", "test"], default="test")
    s.add_argument("--data-dir")
    s.add_argument("--exclude-seen", action="store_true", help="drop context items from the candidates")
    s.add_argument("--csv", help=f"history CSV to append to ({','.join(HISTORY_COLUMNS)})")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train one model per grid value")
    run_flags(s)
    s.add_argument("--param", choices=sorted(SWEEP_PARAMS), required=True)
    s.add_argument("--grid", default="0.0:1.0:0.1")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out", help="sweep CSV path (default: <out_dir>/sweep_<param>.csv)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        errors = getattr(exc, "errors", None) or [str(exc)]
        for line in errors:
            print(f"elecrec: error: {line}", file=sys.stderr)
        return 2
    except (CheckpointError, data.DatasetError, data.SplitError, OSError, ValueError) as exc:
        print(f"elecrec: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

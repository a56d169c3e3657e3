"""Run harnesses shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .checkpoint import save_checkpoint
from .data import SplitDataset, leave_one_out_split, load_split, synth_generate
from .metrics import KS, MetricsReport, evaluate_split
from .train import TrainConfig, TrainResult, train_loop

SWEEP_PARAMS = {"alpha": "alpha", "lambda": "lam"}
METRIC_COLUMNS = ["hr5", "hr10", "ndcg5", "ndcg10"]


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` inclusive of ``stop`` (within float slack)."""
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"grid {text!r} is not start:stop:step") from None
    if step <= 0 or stop < start:
        raise ValueError(f"grid {text!r} needs step > 0 and stop >= start")
    n = math.floor((stop - start) / step + 1e-9) + 1
    return [round(start + i * step, 10) for i in range(n)]


def metric_values(report: MetricsReport) -> list[float]:
    return [report.hr[k] for k in KS] + [report.ndcg[k] for k in KS]


def synthetic_split(users: int = 1000, items: int = 200, noise: float = 0.1, seed: int = 0) -> SplitDataset:
    """The in-memory equivalent of ``synth`` followed by ``prepare``.

    Synthetic items are already dense 1..V and every sequence has at least
    ten interactions, so k-core filtering is a no-op at the default sizes.
    """
    seqs = synth_generate(users, items, seed, noise)
    return leave_one_out_split(seqs, num_items=items)


def train_to_dir(split: SplitDataset, config: TrainConfig, out_dir: str | None,
                 data_dir: str | None = None) -> TrainResult:
    """Train, then write ``history.csv`` and ``best.ckpt`` under ``out_dir`` (if given)."""
    history = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        history = os.path.join(out_dir, "history.csv")
    result = train_loop(split, config, history_path=history)
    if out_dir:
        extra = {"best_epoch": result.best_epoch}
        if data_dir:
            extra["data_dir"] = os.path.abspath(data_dir)
        save_checkpoint(result.model, os.path.join(out_dir, "best.ckpt"), extra)
    return result


def _sweep_point(args) -> tuple[float, list[float]]:
    split, config, value = args
    result = train_loop(split, config)
    return value, metric_values(evaluate_split(result.model, split, "test"))


def run_sweep(split: SplitDataset, base: TrainConfig, param: str, grid: list[float],
              parallel: int = 1) -> list[tuple[float, list[float]]]:
    """Train one model per grid value with the base seed; return (value, test metrics) rows."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter {param!r} not one of {', '.join(SWEEP_PARAMS)}")
    jobs = [(split, replace(base, **{SWEEP_PARAMS[param]: v}), v) for v in grid]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(job) for job in jobs]


def write_sweep_csv(rows, param: str, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([param] + METRIC_COLUMNS)
        for value, metrics in rows:
            w.writerow([f"{value:g}"] + [f"{m:.6f}" for m in metrics])


def load_data(data_dir: str) -> SplitDataset:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory {data_dir!r} does not exist")
    return load_split(data_dir)

"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--epoch]

Shapes match one training batch at the default settings (128 sequences of
50 positions, d=64, 200 items).  ``--epoch`` also times a full training epoch
under each backend, each in a fresh interpreter.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from elecrec import _fallback

try:
    from elecrec import _kernels
except ImportError:
    _kernels = None

ROWS, D, FF, V = 128 * 50, 64, 256, 201

EPOCH_SNIPPET = """
import time
from elecrec import kernels
from elecrec.experiments import synthetic_split
from elecrec.train import TrainConfig, train_loop
split = synthetic_split()
t = time.perf_counter()
train_loop(split, TrainConfig(epochs_max=1, clock="none"))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def cases(rng):
    x = rng.standard_normal((ROWS, D)).astype(np.float32)
    h = rng.standard_normal((ROWS, FF)).astype(np.float32)
    gain = rng.standard_normal(D).astype(np.float32)
    bias = rng.standard_normal(D).astype(np.float32)
    logits = rng.standard_normal((ROWS, V)).astype(np.float32)
    targets = rng.integers(1, V, ROWS)
    valid = rng.random(ROWS) < 0.8
    ids = rng.integers(0, V, ROWS)
    _, xhat, rstd = _fallback.layer_norm_forward(x, gain, bias, 1e-5)
    _, t = _fallback.gelu_forward(h)
    y = _fallback.softmax_rows(logits.copy())
    return {
        "gelu_forward": lambda k: k.gelu_forward(h),
        "gelu_backward": lambda k: k.gelu_backward(h, h, t),
        "layer_norm_forward": lambda k: k.layer_norm_forward(x, gain, bias, 1e-5),
        "layer_norm_backward": lambda k: k.layer_norm_backward(x, xhat, rstd, gain),
        "softmax_xent": lambda k: k.softmax_xent(logits, targets, valid),
        "softmax_rows": lambda k: k.softmax_rows(logits.copy()),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(logits, y),
        "scatter_add_rows": lambda k: k.scatter_add_rows(np.zeros((V, D), np.float32), ids, x),
    }


def best_ms(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1000


def epoch_times():
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ELECREC_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True,
                             check=True)
        backend, seconds = res.stdout.split()
        out[backend] = float(seconds)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--epoch", action="store_true", help="also time one training epoch per backend")
    args = ap.parse_args()
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'kernel':<24}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name, call in cases(np.random.default_rng(0)).items():
        slow = best_ms(lambda: call(_fallback), args.repeat)
        fast = best_ms(lambda: call(_kernels), args.repeat)
        print(f"{name:<24}{slow:>10.3f}{fast:>13.3f}{slow / fast:>8.1f}x")
    if args.epoch:
        times = epoch_times()
        print(f"\none epoch, elecrec_fs: numpy {times['python']:.2f}s, compiled {times['compiled']:.2f}s")


if __name__ == "__main__":
    main()

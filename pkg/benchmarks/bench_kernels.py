"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also times a full contextual-bandit training run under each backend by
re-running this script in a subprocess with TRACEKIT_PURE set.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tracekit import _pykernels

try:
    from tracekit import _kernels
except ImportError:  # extension not built
    _kernels = None


def _cases():
    rng = np.random.default_rng(0)
    blob = rng.bytes(4096)
    tokens = [f"tok{i % 97}" for i in range(400)]
    n, k = 2048, 11
    args = (rng.normal(size=(n, k)), rng.integers(0, k, size=n), rng.normal(-1.0, 0.3, size=n),
            rng.normal(size=n), np.full(n, 1.0 / n), 0.2, 1.0)
    return {
        "fnv1a64 (4 KiB)": lambda m: m.fnv1a64(blob),
        "hash_features (400 tokens, d=256)": lambda m: m.hash_features(tokens, 256),
        "clipped_surrogate (2048 x 11)": lambda m: m.clipped_surrogate(*args),
    }


def _best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def _train_seconds(pure: bool) -> float:
    env = dict(os.environ, TRACEKIT_PURE="1" if pure else "0")
    code = ("import time; from tracekit.grpo import TrainerConfig, train_capability; "
            "from tracekit.presets import bandit_policy; t=time.perf_counter(); "
            "train_capability('contextual_bandit', TrainerConfig(), 0, bandit_policy()); "
            "print(time.perf_counter()-t)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-train", action="store_true")
    a = ap.parse_args()
    print(f"{'kernel':<36}{'python':>12}{'cython':>12}{'speedup':>9}")
    for name, call in _cases().items():
        py = _best(lambda: call(_pykernels), a.repeat)
        if _kernels is None:
            print(f"{name:<36}{py * 1e6:>10.1f}us{'n/a':>12}")
            continue
        cy = _best(lambda: call(_kernels), a.repeat)
        print(f"{name:<36}{py * 1e6:>10.1f}us{cy * 1e6:>10.1f}us{py / cy:>8.1f}x")
    if not a.skip_train:
        py, cy = _train_seconds(True), _train_seconds(False)
        print(f"{'bandit training, 40 iterations':<36}{py:>11.2f}s{cy:>11.2f}s{py / cy:>8.1f}x")


if __name__ == "__main__":
    main()

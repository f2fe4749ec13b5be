"""Compare the numba and pure-numpy kernel backends.

The backend is fixed at import time, so each one runs in its own
subprocess with LACT_BACKEND set. Usage:

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit


def measure(repeat: int) -> dict:
    import numpy as np

    from lact import _kernels
    from lact.data import SyntheticConfig, generate_case
    from lact.model import ModelConfig, build
    from lact.pipeline import soft_dice_bce_loss
    from lact.tensor import backward

    rng = np.random.default_rng(0)
    xp = rng.normal(size=(16, 18, 18, 18))
    out_shape = (16, 16, 16)
    cols = _kernels.im2col(xp, 3, 1, out_shape)
    mask = rng.random((48, 48, 48)) < 0.15

    series, target = generate_case(SyntheticConfig(seed=0), 3)
    x = series.volumes[:, None, :16, :16, :16]
    y = target[None, :16, :16, :16]
    model = build(ModelConfig())

    def train_step():
        model.zero_grad()
        backward(soft_dice_bce_loss(model(x), y))

    jobs = {
        "im2col 16ch 16^3 k3": lambda: _kernels.im2col(xp, 3, 1, out_shape),
        "col2im 16ch 16^3 k3": lambda: _kernels.col2im(cols, xp.shape, 3, 1, out_shape),
        "label27 48^3 p=0.15": lambda: _kernels.label27(mask),
        "train step 16^3 crop": train_step,
    }
    for fn in jobs.values():   # warm-up also triggers JIT compilation
        fn()
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in jobs.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(measure(args.repeat)))
        return

    timings = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, LACT_BACKEND=backend)
        proc = subprocess.run([sys.executable, __file__, "--child", backend,
                               "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        timings[backend] = json.loads(proc.stdout.strip().splitlines()[-1])

    print(f"{'kernel':24s} {'numba ms':>10s} {'numpy ms':>10s} {'numpy/numba':>12s}")
    for name in timings["numba"]:
        a, b = timings["numba"][name] * 1e3, timings["numpy"][name] * 1e3
        print(f"{name:24s} {a:10.2f} {b:10.2f} {b / a:12.2f}")


if __name__ == "__main__":
    main()

"""Compiled kernels versus the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel at the shapes the default model uses (batch 32,
32x32 chips, 8 and 16 channels), then one full forward+backward pass per
backend in a fresh interpreter so the backend switch takes effect.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedsar import _fallback

try:
    from fedsar import _kernels
except ImportError:  # extension not built
    _kernels = None

STEP = r"""
import timeit, numpy as np
from fedsar import model as nn, kernels
arch = nn.Architecture()
g = np.random.default_rng(0)
p = nn.init_params(arch, g)
x = g.gamma(3.0, 1 / 3.0, (32, 32, 32)); y = g.integers(0, 10, 32)
nn.backward(p, x, y)
t = min(timeit.repeat(lambda: nn.backward(p, x, y), number=1, repeat={repeat}))
print(kernels.BACKEND, t)
"""


def cases(rng):
    b = 32
    x1 = np.ascontiguousarray(rng.normal(size=(1, b, 32, 32)))
    w1 = np.ascontiguousarray(rng.normal(size=(8, 1, 3, 3)))
    b1 = rng.normal(size=8)
    y1 = np.ascontiguousarray(rng.normal(size=(8, b, 32, 32)))
    cgate = np.ascontiguousarray(rng.uniform(size=(8, b)))
    sgate = np.ascontiguousarray(rng.uniform(size=(b, 32, 32)))
    maps = np.ascontiguousarray(rng.normal(size=(2, b, 32, 32)))
    cols = np.ascontiguousarray(rng.normal(size=(72, b * 16 * 16)))
    grid = np.ascontiguousarray(rng.normal(size=(32, 32)))
    out = np.zeros((32, 32))
    idx = np.zeros((b, 32, 32), dtype=np.int64)
    vals = np.ascontiguousarray(rng.normal(size=(b, 32, 32)))
    return {
        "haar_fwd_level 32x32": lambda k: k.haar_fwd_level(grid, out, 32, 32),
        "im2col conv2": lambda k: k.im2col(y1, 3, 2, 1),
        "col2im conv2": lambda k: k.col2im(cols, 8, b, 32, 32, 3, 2, 1),
        "conv_direct_forward conv1": lambda k: k.conv_direct_forward(x1, w1, b1, 1, 1),
        "conv_direct_backward conv1": lambda k: k.conv_direct_backward(y1, x1, w1, 1, 1, False),
        "channel_max 8ch": lambda k: k.channel_max(y1),
        "scatter_channel_add 8ch": lambda k: k.scatter_channel_add(y1.copy(), idx, vals),
        "gate_forward 8ch": lambda k: k.gate_forward(y1, cgate),
        "gate_backward 8ch": lambda k: k.gate_backward(y1, y1, sgate, cgate, maps, idx),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    table = cases(np.random.default_rng(0))
    backends = [("python", _fallback)] + ([("compiled", _kernels)] if _kernels is not None else [])
    print(f"{'kernel':<28}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, fn in table.items():
        times = [min(timeit.repeat(lambda: fn(mod), number=3, repeat=args.repeat)) / 3 for _, mod in backends]
        ratio = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else ""
        print(f"{label:<28}" + "".join(f"{t * 1e3:10.3f}ms" for t in times) + ratio)

    print("\nforward+backward, default model, batch 32")
    for flag in ("1", "0"):
        env = dict(os.environ, FEDSAR_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", STEP.format(repeat=args.repeat)], env=env,
                             capture_output=True, text=True, check=True)
        name, t = res.stdout.split()
        print(f"  {name:<10} {float(t) * 1e3:8.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())

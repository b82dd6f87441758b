"""Time the numba and pure-numpy kernels side by side.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes are the ones a 64-patch training batch of the vertical model hits.
The last block times a full training step once per backend, each in a fresh
interpreter with CROSSBAR_NUMBA set accordingly.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from crossbar import _kernels

STEP_SNIPPET = """
import time, numpy as np
from crossbar import nn, submodel
m = submodel.build("vertical", 0)
x = np.random.default_rng(0).random((64, 1, 100, 20)).astype(np.float32)
t = np.arange(64) % 2
opt = nn.OptimizerState(0.0005, 0.9)
def step():
    z, cache = m.logits(x, "train", np.random.default_rng(1), 0.5, keep_cache=True)
    _, g = nn.softmax_cross_entropy(z.astype(np.float64), t)
    nn.sgd_step(m.params(), m.backward(cache, g.astype(np.float32)), opt)
step()
t0 = time.perf_counter()
for _ in range({n}):
    step()
print((time.perf_counter() - t0) / {n})
"""


def best(fn, repeat):
    fn()  # warm-up, includes JIT compilation
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def cases(rng):
    x = rng.standard_normal((16, 64, 92, 16)).astype(np.float32)
    x1 = rng.standard_normal((1, 64, 100, 20)).astype(np.float32)
    cols = _kernels.im2col_numpy(x1, 5, 3)
    pooled_in = rng.standard_normal((36, 64, 92, 16)).astype(np.float32)
    out, arg = _kernels.maxpool_forward_numpy(pooled_in, 2, 2, 2, 2)
    g = rng.standard_normal(out.shape).astype(np.float32)
    a = rng.integers(0, 296, (600, 2))
    b = rng.integers(0, 296, (600, 2))
    return {
        "im2col 16x(16,64,92,16) 5x3": (lambda k: lambda: k(x, 5, 3), "im2col"),
        "col2im (64,1,100,20) 5x3": (lambda k: lambda: k(cols, x1.shape, 5, 3), "col2im"),
        "maxpool fwd (36,64,92,16)": (lambda k: lambda: k(pooled_in, 2, 2, 2, 2), "maxpool_forward"),
        "maxpool bwd (36,64,92,16)": (lambda k: lambda: k(g, arg, pooled_in.shape, 2, 2, 2, 2), "maxpool_backward"),
        "directed hausdorff 600x600": (lambda k: lambda: k(a, b), "directed_hausdorff_sq"),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  bound")
    for label, (make, name) in cases(rng).items():
        t_np = best(make(getattr(_kernels, name + "_numpy")), args.repeat)
        t_nb = best(make(getattr(_kernels, name + "_numba")), args.repeat)
        chosen = "numba" if getattr(_kernels, name) is getattr(_kernels, name + "_numba") else "numpy"
        print(f"{label:32s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.2f}  {chosen}")

    print()
    for flag in ("0", "1"):
        code = STEP_SNIPPET.format(n=args.steps)
        env = dict(os.environ, CROSSBAR_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend = "numba" if flag == "1" else "numpy"
        print(f"training step, 64 vertical patches, {backend:5s} backend: {1e3 * float(res.stdout):8.1f} ms")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py            # kernels only
    python3 benchmarks/bench_kernels.py --e2e      # also a short training run per path

The kernel table reports the best of several repeats after one warm-up call,
so JIT compile time is excluded. ``--e2e`` launches a subprocess per path
(MSW_DISABLE_JIT=0/1) and reports seconds per training step.
"""

import argparse
import os
import subprocess
import sys
import tempfile
import timeit

import numpy as np

from motionbox import kernels
from motionbox._jit import HAVE_NUMBA


def cases():
    rng = np.random.default_rng(0)
    out = []
    for c, hw, k in ((3, 48, 3), (16, 48, 3), (32, 24, 3), (64, 12, 3)):
        xp = rng.standard_normal((c, hw + 2, hw + 2))
        ho = wo = hw
        out.append((f"im2col c={c} {hw}x{hw}", "im2col", (xp, k, 1, ho, wo)))
        cols = rng.standard_normal((c * k * k, ho * wo))
        out.append((f"col2im c={c} {hw}x{hw}", "col2im", (cols, c, hw + 2, hw + 2, k, 1, ho, wo)))
    for size, k, d in ((12, 3, 2), (12, 5, 2), (32, 3, 2)):
        out.append((f"pairs box {size}x{size} k={k} d={d}", "enumerate_box_pairs", (0, 0, size, size, size, size, k, d)))
    feat = rng.standard_normal((3, 12, 12))
    pairs = kernels.enumerate_box_pairs_numpy(0, 0, 12, 12, 12, 12, 3, 2)
    out.append((f"pair distances n={len(pairs)}", "pair_distances", (feat, pairs)))
    return out


def best_of(fn, args, repeat=5):
    fn(*args)
    t = timeit.Timer(lambda: fn(*args))
    n, _ = t.autorange()
    return min(t.repeat(repeat, n)) / n


def bench_kernels():
    rows = []
    for label, name, args in cases():
        t_np = best_of(getattr(kernels, f"{name}_numpy"), args)
        t_nb = best_of(getattr(kernels, f"{name}_numba"), args) if HAVE_NUMBA else float("nan")
        rows.append((label, t_np, t_nb))
    w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{w}}  {'numpy us':>10}  {'numba us':>10}  {'speedup':>8}")
    for label, a, b in rows:
        print(f"{label:<{w}}  {a * 1e6:10.1f}  {b * 1e6:10.1f}  {a / b:8.2f}")


E2E = """
import time
from motionbox.synthdata import SceneConfig, generate_split
from motionbox.training import RunConfig, TrainConfig, train
d = {d!r}
scene = SceneConfig(height=48, width=48, camouflage=True, min_size=10, max_size=18, max_speed=3.0, max_instances=2)
generate_split(scene, 8, d + "/data")
run = RunConfig(train=TrainConfig(iterations=2, batch_size=4))
train(run, d + "/data", d + "/warm")
run = RunConfig(train=TrainConfig(iterations={iters}, batch_size=4, log_interval=1000))
t = time.perf_counter()
train(run, d + "/data", d + "/run")
print((time.perf_counter() - t) / {iters})
"""


def bench_e2e(iters):
    for flag, label in (("0", "numba"), ("1", "numpy")):
        with tempfile.TemporaryDirectory() as d:
            env = dict(os.environ, MSW_DISABLE_JIT=flag)
            out = subprocess.run(
                [sys.executable, "-c", E2E.format(d=d, iters=iters)], env=env, capture_output=True, text=True, check=True
            )
            print(f"train step ({label}, 48x48, batch 4): {float(out.stdout.split()[-1]):.3f} s")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--e2e", action="store_true")
    ap.add_argument("--iters", type=int, default=20)
    args = ap.parse_args()
    bench_kernels()
    if args.e2e:
        bench_e2e(args.iters)

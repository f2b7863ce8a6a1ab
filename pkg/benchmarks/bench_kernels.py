"""Time the numba kernels against their numpy fallbacks, plus one fusion training step per backend.

    python benchmarks/bench_kernels.py [--repeat 20]

The per-step comparison runs a subprocess with MOCTEFUSE_DISABLE_NUMBA=1 so
the fallback is exercised exactly as users would select it.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from moctefuse import _kernels as K

STEP_SNIPPET = """
import time, numpy as np
from moctefuse import tensor as T
from moctefuse.fusion import FusionConfig, MoCTEFuse
from moctefuse.losses import fusion_objective
rng = np.random.default_rng(0)
model = MoCTEFuse(FusionConfig(channels=16, depth=2), seed=0)
ir, vi = rng.uniform(0, 1, (2, 4, 32, 32))
def step():
    model.zero_grad()
    out = model(T.Tensor(ir), T.Tensor(vi), np.full(4, 0.6))
    loss, _ = fusion_objective(out, T.Tensor(ir), T.Tensor(vi), np.full(4, 0.6))
    loss.backward()
step()
t = time.perf_counter(); [step() for _ in range({n})]
print((time.perf_counter() - t) / {n})
"""


def kernel_cases(rng):
    xp = rng.standard_normal((4, 16, 34, 34))
    cols = K.im2col_numpy(xp, 3, 3, 1)
    scores = rng.standard_normal((64, 2, 64, 128))
    y = K.softmax_lastaxis_numpy(scores)
    g = rng.standard_normal(scores.shape)
    a = rng.integers(0, 256, 128 * 128)
    b = rng.integers(0, 256, 128 * 128)
    return [
        ("im2col 4x16x34x34 k3", K.im2col_numpy, getattr(K, "im2col_numba", None), (xp, 3, 3, 1)),
        ("col2im 4x16x34x34 k3", K.col2im_numpy, getattr(K, "col2im_numba", None), (cols, 16, 34, 34, 3, 3, 1)),
        ("softmax 64x2x64x128", K.softmax_lastaxis_numpy, getattr(K, "softmax_lastaxis_numba", None), (scores,)),
        ("softmax_bwd 64x2x64x128", K.softmax_backward_numpy, getattr(K, "softmax_backward_numba", None), (y, g)),
        ("joint_hist 128x128", K.joint_histogram_numpy, getattr(K, "joint_histogram_numba", None), (a, b, 256)),
    ]


def bench(fn, args, repeat):
    fn(*args)  # compile / warm caches
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def step_time(disable_numba, n):
    env = dict(os.environ, MOCTEFUSE_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  max|diff|")
    for name, f_np, f_nb, fargs in kernel_cases(rng):
        t_np = bench(f_np, fargs, args.repeat)
        if f_nb is None:
            print(f"{name:28s} {t_np * 1e3:10.3f} {'n/a':>10s}")
            continue
        t_nb = bench(f_nb, fargs, args.repeat)
        diff = np.max(np.abs(np.asarray(f_np(*fargs), float) - np.asarray(f_nb(*fargs), float)))
        print(f"{name:28s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:8.2f}  {diff:.1e}")
    s_nb, s_np = step_time(False, args.steps), step_time(True, args.steps)
    print(f"\nfusion train step, batch 4 at 32x32, C=16, depth 2: "
          f"numba {s_nb:.3f}s  numpy {s_np:.3f}s  speedup {s_np / s_nb:.2f}x")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the NumPy reference backend.

Times the loop-bound kernels (forward + backward) on the desk-config shapes
and on larger grids, plus one full training step with each backend. The
transposed convolution and all matrix products are BLAS-backed in both
backends and are not compared here.

Run:  python3 benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import importlib
import os
import sys
import time

import numpy as np


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats: int) -> None:
    from pixelsail.kernels import reference as ref

    try:
        from pixelsail.kernels import _core as core
    except ImportError:
        print("compiled backend not built; run pip install -e . --no-build-isolation")
        sys.exit(1)

    rng = np.random.default_rng(0)
    cases = []
    for c, h, w in [(64, 8, 8), (64, 32, 32), (128, 32, 32)]:
        x = rng.normal(size=(c, h, w)).astype(np.float32)
        k = rng.normal(size=(c, 3, 3)).astype(np.float32)
        gd = rng.normal(size=(c, h, w)).astype(np.float32)
        cases.append((f"depthwise_conv2d fwd {c}x{h}x{w}",
                      lambda x=x, k=k: ref.depthwise_conv2d_fwd(x, k),
                      lambda x=x, k=k: core.depthwise_conv2d_fwd(x, k)))
        cases.append((f"depthwise_conv2d bwd {c}x{h}x{w}",
                      lambda x=x, k=k, gd=gd: ref.depthwise_conv2d_bwd(x, k, gd),
                      lambda x=x, k=k, gd=gd: core.depthwise_conv2d_bwd(x, k, gd)))
        gr = rng.normal(size=(c, 4 * h, 4 * w)).astype(np.float32)
        cases.append((f"bilinear_resize fwd {c}x{h}x{w}->4x",
                      lambda x=x, h=h, w=w: ref.bilinear_resize_fwd(x, 4 * h, 4 * w),
                      lambda x=x, h=h, w=w: core.bilinear_resize_fwd(x, 4 * h, 4 * w)))
        cases.append((f"bilinear_resize bwd {c}x{h}x{w}->4x",
                      lambda gr=gr, h=h, w=w: ref.bilinear_resize_bwd(h, w, gr),
                      lambda gr=gr, h=h, w=w: core.bilinear_resize_bwd(h, w, gr)))

    print(f"{'kernel':<38} {'numpy':>10} {'compiled':>10} {'speedup':>8}")
    for name, f_ref, f_core in cases:
        t_ref = _time(f_ref, repeats)
        t_core = _time(f_core, repeats)
        print(f"{name:<38} {t_ref * 1e6:>8.0f}us {t_core * 1e6:>8.0f}us {t_ref / t_core:>7.2f}x")


def bench_train_step(repeats: int) -> None:
    """One full optimizer step with each backend (separate processes would
    be cleaner, but backend choice is import-time, so re-import)."""
    results = {}
    for backend in ("python", "compiled"):
        os.environ["PIXELSAIL_KERNELS"] = backend
        for mod in [m for m in list(sys.modules) if m.startswith("pixelsail")]:
            del sys.modules[mod]
        importlib.invalidate_caches()
        from pixelsail.config import RunConfig
        from pixelsail.train import run_training
        import tempfile

        cfg = RunConfig()
        cfg.train.steps = max(3, repeats // 10)
        cfg.train.batch_size = 2
        cfg.train.distill = "on"
        cfg.data.synthetic_n = 8
        cfg.data.tasks = "refseg"
        with tempfile.TemporaryDirectory() as d:
            t0 = time.perf_counter()
            run_training(cfg, d)
            results[backend] = (time.perf_counter() - t0) / cfg.train.steps
    os.environ.pop("PIXELSAIL_KERNELS", None)
    print(f"\n{'full train step (desk config)':<38} "
          f"{results['python'] * 1e3:>8.1f}ms {results['compiled'] * 1e3:>8.1f}ms "
          f"{results['python'] / results['compiled']:>7.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()
    bench_kernels(args.repeats)
    bench_train_step(args.repeats)

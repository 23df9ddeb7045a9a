"""Compare the compiled and numpy kernel backends on SSIM and GLCM workloads.

Run with ``python3 benchmarks/bench_kernels.py [--size 512] [--repeat 5]``.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from ifbench import _kernels_py
from ifbench.metrics import gaussian_window

try:
    from ifbench import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def workloads(size: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 255, (size, size))
    b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
    win = gaussian_window(11, 1.5)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    q = rng.integers(0, 8, (size, size)).astype(np.int64)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[size // 8: -size // 8, size // 8: -size // 8] = 1
    return {
        "ssim_mean": lambda m: m.ssim_mean(a, b, win, c1, c2),
        "glcm": lambda m: m.glcm(q, mask, 0, 1, 8),
    }


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = {"python": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension unavailable; timing the numpy fallback only")
    print(f"{'kernel':<10} {'backend':<8} {'best ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for name, fn in workloads(args.size).items():
        ref = fn(_kernels_py)
        base = None
        for bname, mod in backends.items():
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
            base = base or t
            diff = float(np.max(np.abs(np.asarray(fn(mod), float) - np.asarray(ref, float))))
            print(f"{name:<10} {bname:<8} {t:>10.2f} {base / t:>7.1f}x {diff:>11.2e}")


if __name__ == "__main__":
    main()

"""Compare the compiled kernel extension against the NumPy fallback.

Runs both backends on representative conv/pool shapes, checks they agree,
and prints per-case timings.  Usage: python3 benchmarks/bench_kernels.py
"""

import argparse
import time

import numpy as np

from deepsim.kernels import numpy_backend

try:
    from deepsim.kernels import _native
except ImportError:
    _native = None

CASES = [
    # (label, input CHW, weight OIKK, stride, padding) for conv2d
    ("conv 11x11/4 stem", (3, 64, 64), (64, 3, 11, 11), 4, 2),
    ("conv 5x5 mid", (64, 15, 15), (192, 64, 5, 5), 1, 2),
    ("conv 3x3 deep", (192, 7, 7), (384, 192, 3, 3), 1, 1),
    ("conv 3x3 wide map", (64, 32, 32), (128, 64, 3, 3), 1, 1),
    ("conv 1x1 squeeze", (128, 13, 13), (32, 128, 1, 1), 1, 0),
]

POOL_CASES = [
    # (label, input CHW, kernel, stride, ceil_mode)
    ("pool 3/2 floor", (64, 31, 31), 3, 2, False),
    ("pool 3/2 ceil", (64, 15, 15), 3, 2, True),
    ("pool 2/2", (128, 32, 32), 2, 2, False),
]


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return out, best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7,
                        help="timing repeats per case (best-of)")
    args = parser.parse_args()

    if _native is None:
        print("compiled extension not built; showing the NumPy fallback only")
    rng = np.random.default_rng(0)
    header = f"{'case':22s} {'numpy ms':>10s} {'native ms':>10s} " \
             f"{'speedup':>8s} {'max|diff|':>10s}"
    print(header)
    print("-" * len(header))

    def row(label, run_numpy, run_native):
        ref, t_np = best_of(run_numpy, args.repeats)
        if _native is None:
            print(f"{label:22s} {t_np * 1e3:10.3f} {'-':>10s} {'-':>8s} "
                  f"{'-':>10s}")
            return
        got, t_nat = best_of(run_native, args.repeats)
        diff = float(np.max(np.abs(ref.astype(np.float64)
                                   - got.astype(np.float64))))
        if not np.allclose(ref, got, rtol=1e-4, atol=1e-5):
            raise SystemExit(f"{label}: backends disagree (max diff {diff})")
        print(f"{label:22s} {t_np * 1e3:10.3f} {t_nat * 1e3:10.3f} "
              f"{t_np / t_nat:8.1f}x {diff:10.2e}")

    for label, xshape, wshape, stride, padding in CASES:
        x = rng.standard_normal(xshape, dtype=np.float32)
        w = (rng.standard_normal(wshape, dtype=np.float32)
             / np.sqrt(np.prod(wshape[1:])))
        b = rng.standard_normal(wshape[0], dtype=np.float32)
        row(label,
            lambda: numpy_backend.conv2d(x, w, b, stride, padding),
            lambda: _native.conv2d(x, w, b, stride, padding))

    for label, xshape, kernel, stride, ceil_mode in POOL_CASES:
        x = rng.standard_normal(xshape, dtype=np.float32)
        row(label,
            lambda: numpy_backend.maxpool2d(x, kernel, stride, ceil_mode),
            lambda: _native.maxpool2d(x, kernel, stride, ceil_mode))


if __name__ == "__main__":
    main()

"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from nowcastkd import _pykernels

try:
    from nowcastkd import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    pred = rng.integers(0, 256, (12, 64, 64)).astype(np.float64)
    gt = rng.integers(0, 256, (12, 64, 64)).astype(np.float64)
    flat_p, flat_t = rng.random(8 * 12 * 64 * 64), rng.random(8 * 12 * 64 * 64)
    raw = np.rint(flat_t * 255)
    return {
        "contingency pool 1 [12,64,64]": lambda m: m.contingency_by_lead(pred, gt, 133.0, 1),
        "contingency pool 4 [12,64,64]": lambda m: m.contingency_by_lead(pred, gt, 133.0, 4),
        "contingency pool 16 [12,64,64]": lambda m: m.contingency_by_lead(pred, gt, 133.0, 16),
        "weighted_sq_error 393k": lambda m: m.weighted_sq_error(flat_p, flat_t, raw, 219.0, 10.0, 1.0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    print(f"{'kernel':<34}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, fn in cases(np.random.default_rng(0)).items():
        times = []
        for _, mod in backends:
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3)
        row = f"{label:<34}" + "".join(f"{t:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()

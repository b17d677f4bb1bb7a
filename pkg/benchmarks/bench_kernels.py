"""Compare the compiled and numpy backends of the hot kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs at the shapes the desk-scale training loop produces
(batch 4, 16^3 crops, base width 8) and at the surface sizes seen when
scoring 32^3 volumes. Outputs are also checked for bitwise agreement.
"""
import argparse
import timeit

import numpy as np

from caml import kernels


def cases(rng):
    x = rng.standard_normal((4, 8, 18, 18, 18)).astype(np.float32)  # padded 16^3, 8 channels
    cols = kernels.im2col3d(x, 3, 3, 3, 1, backend="python")
    down = rng.standard_normal((4, 8, 16, 16, 16)).astype(np.float32)
    src = rng.integers(0, 32, (1500, 3)).astype(np.float64)
    dst = rng.integers(0, 32, (1500, 3)).astype(np.float64)
    sp = np.ones(3)
    return {
        "im2col3d k3 s1": lambda b: kernels.im2col3d(x, 3, 3, 3, 1, backend=b),
        "im2col3d k2 s2": lambda b: kernels.im2col3d(down, 2, 2, 2, 2, backend=b),
        "col2im3d k3 s1": lambda b: kernels.col2im3d(cols, 8, 18, 18, 18, 3, 3, 3, 1, backend=b),
        "min_distances 1500x1500": lambda b: kernels.min_distances(src, dst, sp, backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'python ms':>12}{'cython ms':>12}{'speedup':>10}  bitwise")
    for name, fn in cases(rng).items():
        same = fn("python").tobytes() == fn("cython").tobytes()
        t = {}
        for b in ("python", "cython"):
            t[b] = min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<26}{t['python']:>12.2f}{t['cython']:>12.2f}"
              f"{t['python'] / t['cython']:>9.1f}x  {'yes' if same else 'NO'}")


if __name__ == "__main__":
    main()

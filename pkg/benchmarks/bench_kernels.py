"""Time the compiled and numpy kernel backends on episode-sized and batch-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from varproto import kernels


def cases(rng):
    q = rng.standard_normal((32, 64))
    m = rng.standard_normal((4, 64))
    v = rng.random((4, 64))
    big_q = rng.standard_normal((2000, 64))
    many_m = rng.standard_normal((28, 64))
    many_v = rng.random((28, 64))
    a, b = rng.random((2000, 64)), rng.random((2000, 64))
    return {
        "dirac_sq 32x4x64": lambda mod: mod.dirac_sq(q, m, v),
        "dirac_sq 2000x28x64": lambda mod: mod.dirac_sq(big_q, many_m, many_v),
        "bures_sq_rows 2000x64": lambda mod: mod.bures_sq_rows(big_q, a, big_q[::-1].copy(), b),
        "topk_indices 28x64 k=10": lambda mod: mod.topk_indices(many_v, 10),
        "topk_union 2000x28x64 k=10": lambda mod: mod.topk_union(big_q, many_m, 10),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s}" + "".join(f"{name:>14s}" for name in backends) + "   speedup")
    for label, fn in cases(rng).items():
        times = {}
        for name, mod in backends.items():
            times[name] = min(timeit.repeat(lambda: fn(mod), number=5, repeat=args.repeat)) / 5
        row = f"{label:32s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values())
        if len(times) == 2:
            row += f"   {times['python'] / times['cython']:6.2f}x"
        print(row)


if __name__ == "__main__":
    main()

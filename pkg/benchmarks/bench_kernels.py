"""Compiled vs pure-Python kernels on evaluation-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from spotkit._kernels import compiled_backend, python_backend


def cases(rng):
    costs = [rng.random((k, k)) for k in (3, 5, 6, 8, 16)]
    a = rng.integers(0, 6, 32 * 32)
    b = rng.integers(0, 5, 32 * 32)
    labels = rng.integers(0, 6, (32, 32))
    return {
        "solve_assignment k<=16 x5": lambda m: [m.solve_assignment(c) for c in costs],
        "contingency 32x32": lambda m: m.contingency(a, b, 6, 5),
        "majority_vote 32x32/4": lambda m: m.majority_vote(labels, 4),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=2000)
    args = p.parse_args()
    backends = {"python": python_backend}
    if compiled_backend is not None:
        backends["compiled"] = compiled_backend
    else:
        print("compiled kernels not built; timing the Python fallback only")
    print(f"{'kernel':<28}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {b: min(timeit.repeat(lambda: fn(m), number=args.repeat, repeat=3)) / args.repeat * 1e6
                 for b, m in backends.items()}
        row = f"{name:<28}" + "".join(f"{t:>12.1f}us" for t in times.values())
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()

"""Compiled vs pure-Python scheduler kernels.

    python benchmarks/bench_scheduler.py [--instances 300] [--tasks 7]

Times greedy ordering and exhaustive search on the same seeded random
instances with both backends and checks that they return identical results.
"""

import argparse
import sys
import time

import numpy as np

from splitlora import _sched_py

try:
    from splitlora import _sched_ext
except ImportError:
    _sched_ext = None


def instances(count, n, seed):
    out = []
    for k in range(count):
        rng = np.random.default_rng(seed + k)
        out.append((list(rng.uniform(0, 1, n)), list(rng.uniform(0.1, 1, n)), list(rng.uniform(0, 2, n))))
    return out


def bench(kernel, name, data, repeat):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = [getattr(kernel, name)(*inst) for inst in data]
        best = min(best, time.perf_counter() - t0)
    return best, result


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=300)
    ap.add_argument("--tasks", type=int, default=7)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _sched_ext is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    data = instances(args.instances, args.tasks, args.seed)
    print(f"{args.instances} instances, {args.tasks} tasks, best of {args.repeat}")
    print(f"{'kernel':<12} {'python (s)':>11} {'cython (s)':>11} {'speedup':>8}")
    for name in ("greedy", "brute_force"):
        tp, rp = bench(_sched_py, name, data, args.repeat)
        tc, rc = bench(_sched_ext, name, data, args.repeat)
        if name == "brute_force":
            same = all(list(a[0]) == list(b[0]) and a[1] == b[1] for a, b in zip(rp, rc))
        else:
            same = all(list(a) == list(b) for a, b in zip(rp, rc))
        print(f"{name:<12} {tp:>11.4f} {tc:>11.4f} {tp / tc:>7.1f}x{'' if same else '  MISMATCH'}")
        if not same:
            return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Time the numba and numpy kernels on desk-sized inputs, plus a short training run.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--iterations 50]
"""
import argparse
import time

import numpy as np

from pgtensor import _kernels
from pgtensor.inference import train
from pgtensor.state import TrainConfig
from pgtensor.synthetic import desk_preset, generate


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_inputs(rng, B=512, K=5, R=8, groups=300):
    G = rng.uniform(0.1, 2.0, (B, K, R))
    C = rng.normal(size=(B, R))
    inv = rng.integers(0, groups, B)
    w = rng.uniform(0.0, 0.25, B)
    M = rng.normal(size=(groups, R, R))
    F = M @ M.transpose(0, 2, 1) + np.eye(R)
    g = rng.normal(size=(groups, R))
    return G, C, inv, w, F, g, groups


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--iterations", type=int, default=50)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")

    G, C, inv, w, F, g, groups = kernel_inputs(np.random.default_rng(0))
    cases = {
        "row_products": lambda k: k.row_products(G),
        "accumulate": lambda k: k.accumulate(C, inv, groups, w, w, w),
        "spd_solve": lambda k: k.spd_solve(F, g),
        "em_sweep": lambda k: k.em_sweep(g, g, F, 0.5),
    }
    print(f"{'kernel':<14}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    prev = _kernels.active_backend()
    try:
        for name, fn in cases.items():
            t = {}
            for flag in (False, True):
                _kernels.use_numba(flag)
                t[flag] = best_of(lambda: fn(_kernels), args.repeat)
            print(f"{name:<14}{1e3 * t[False]:>10.3f}{1e3 * t[True]:>10.3f}{t[False] / t[True]:>8.1f}x")

        tensor, labels, _ = generate(desk_preset(0))
        cfg = TrainConfig(iterations=args.iterations)
        t = {}
        for flag in (False, True):
            _kernels.use_numba(flag)
            train(tensor, labels, TrainConfig(iterations=2))
            t0 = time.perf_counter()
            train(tensor, labels, cfg)
            t[flag] = time.perf_counter() - t0
        print(f"{'train/iter':<14}{1e3 * t[False] / args.iterations:>10.3f}"
              f"{1e3 * t[True] / args.iterations:>10.3f}{t[False] / t[True]:>8.1f}x")
    finally:
        _kernels.use_numba(prev == "numba")


if __name__ == "__main__":
    main()

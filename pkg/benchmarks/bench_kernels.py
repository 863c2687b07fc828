"""Time the numba kernels against the numpy/python fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--sim-horizon 2e4]

First calls (JIT compile) are excluded; the table shows the best of
``--repeat`` timed runs.
"""

import argparse
import timeit

import numpy as np

from bcmp_amod import kernels
from bcmp_amod.optimizer import decompose_to_policy, solve_a_oscarr
from bcmp_amod.scenario import load_scenario
from bcmp_amod.simulator import SimConfig, simulate


def best(fn, repeat):
    fn()  # warm up / compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sim-horizon", type=float, default=2e4)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    gamma = rng.uniform(0.1, 2.0, 84)
    kinds = np.zeros(84, bool)
    kinds[:4] = True

    doc = load_scenario("grid5x5")
    sol = solve_a_oscarr(doc.network)
    pol = decompose_to_policy(sol)
    cfg = SimConfig(40, horizon=args.sim_horizon, seed=0)

    cases = [
        ("mva m=2000", lambda: kernels._mva_numba(gamma, kinds, 2000),
         lambda: kernels._mva_numpy(gamma, kinds, 2000)),
        ("convolution m=2000", lambda: kernels._convolve_numba(gamma, kinds, 2000),
         lambda: kernels._convolve_numpy(gamma, kinds, 2000)),
        (f"simulate grid m=40 T={args.sim_horizon:g}", lambda: simulate(sol.network, pol, cfg, use_numba=True),
         lambda: simulate(sol.network, pol, cfg, use_numba=False)),
    ]
    print(f"{'kernel':<34}{'numba [s]':>12}{'fallback [s]':>14}{'speedup':>10}")
    for name, fast, slow in cases:
        a = best(fast, args.repeat)
        b = best(slow, max(1, args.repeat // 2) if "simulate" in name else args.repeat)
        print(f"{name:<34}{a:>12.4f}{b:>14.4f}{b / a:>9.1f}x")


if __name__ == "__main__":
    main()

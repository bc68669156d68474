"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]

Both backends are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from welfare_mte import _kernels_python as py
from welfare_mte import kernels


def regime_inputs(n, rng):
    return dict(
        theta1=rng.uniform(5, 60, n),
        theta2=rng.uniform(0.5, 3.0, n),
        theta3=np.zeros(n),
        w=rng.uniform(6, 20, n),
        n=rng.exponential(50, n),
        g=rng.uniform(0, 500, n),
        t=rng.uniform(0, 0.7, n),
        r=rng.uniform(0, 0.3, n),
        hcap=80.0,
    )


def probit_inputs(n, rng):
    xb = rng.normal(size=n)
    return dict(xb=xb, y=(xb + rng.normal(size=n) > 0).astype(float))


def check(fast, slow, args):
    for a, b in zip(fast(**args), slow(**args)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-9)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "compiled":
        print("compiled extension not built; only the numpy path is available")
    rng = np.random.default_rng(args.seed)
    cases = [
        ("solve_regimes", kernels.solve_regimes, py.solve_regimes, regime_inputs(args.n, rng)),
        ("probit_terms", kernels.probit_terms, py.probit_terms, probit_inputs(args.n, rng)),
    ]
    print(f"n = {args.n:,}, best of {args.repeat}")
    print(f"{'kernel':<16}{kernels.BACKEND:>12}{'numpy':>12}{'speedup':>10}")
    for name, fast, slow, kw in cases:
        check(fast, slow, kw)
        t_fast = min(timeit.repeat(lambda: fast(**kw), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(**kw), number=1, repeat=args.repeat))
        print(f"{name:<16}{t_fast * 1e3:>10.1f}ms{t_slow * 1e3:>10.1f}ms{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()

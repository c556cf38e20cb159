"""Finite-difference derivative of Lambda against the boundary formula, with and
without the factor 2, on random sphere configurations."""

import argparse

import numpy as np

from lcoupling import harness, lgeo


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    flow = harness.default_flows()["sphere"]
    rng = np.random.default_rng(a.seed)
    print(f"{'fd':>12} {'formula':>12} {'without 2':>12} {'ratio fd/without':>17}")
    for _ in range(a.n):
        x, y, t = harness._pair(flow, rng)
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        r = lgeo.first_variation_check(flow, 1.0, 4.0, t, x, y, u)
        print(f"{r.finite_difference:12.6f} {r.formula:12.6f} {r.formula_half:12.6f} "
              f"{r.finite_difference / r.formula_half:17.6f}")


if __name__ == "__main__":
    main()

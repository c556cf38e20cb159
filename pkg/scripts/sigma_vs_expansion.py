"""Second-order coefficient of the one-step change of Lambda against Sigma(lam).

(Lambda' - Lambda - eps zeta) / eps^2 is Richardson-extrapolated to eps -> 0 and
compared with the quadratic form Sigma at the same increment lam.
"""

import argparse

import numpy as np

from lcoupling import harness, lgeo, walk
from lcoupling.geometry import Point


def coefficient(flow, X, Y, t, lam, eps):
    cfg = walk.WalkConfig(flow, 1.0, 4.0, t, eps, tuple(X.coords), tuple(Y.coords),
                          max_steps=1)
    L0 = lgeo.solve_min_lgeodesic(flow, X, t, Y, 4 * t, audit=False).action
    Xn, Yn, z, _, _ = walk.coupled_step(flow, X, Y, t, lam, cfg)
    tn = t + eps * eps
    L1 = lgeo.solve_min_lgeodesic(flow, Xn, tn, Yn, 4 * tn, audit=False).action
    return (L1 - L0 - eps * z) / eps**2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    rng = np.random.default_rng(a.seed)
    for name in ("torus", "sphere", "hyperbolic"):
        flow = harness.default_flows()[name]
        for _ in range(a.n):
            X, Y = harness.random_point(flow, rng), harness.random_point(flow, rng)
            X, Y = Point(X.coords, X.chart), Point(Y.coords, Y.chart)
            t = 1.0 + rng.random() * 0.5
            lam = walk.sample_uniform_ball(flow.dim, rng)
            res = lgeo.solve_min_lgeodesic(flow, X, t, Y, 4 * t, audit=False)
            sig = walk.sigma_form(flow, 1.0, 4.0, t, res).values(lam[None])[0]
            c1 = coefficient(flow, X, Y, t, lam, 0.01)
            c2 = coefficient(flow, X, Y, t, lam, 0.005)
            print(f"{name:10s} expansion {2 * c2 - c1:+.5f}  Sigma {sig:+.5f}")


if __name__ == "__main__":
    main()

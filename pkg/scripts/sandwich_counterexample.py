"""Short time gaps break the lower L bound with the gap exponent on the sphere.

Prints L(x, 1; y, tau2) against both lower-bound variants for a range of tau2.
"""

import argparse

import numpy as np

from lcoupling import lgeo
from lcoupling.geometry import FlowManifold, Point


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--angle", type=float, default=2.0, help="unit-sphere angle of x, y")
    a = ap.parse_args()
    flow = FlowManifold.round_sphere(2, 1.0, 1.0, 8.0)
    x = Point([0.0, 0.0])
    # |v|_{g(T)} = angle sqrt(a(T)) for v = (angle/2, 0) at the chart origin
    y = flow.exp(8.0, x, np.array([a.angle / 2.0, 0.0]))
    print(f"{'tau2':>6} {'L':>10} {'lower(gap)':>11} {'lower(horizon)':>15}  gap bound holds")
    for tau2 in (1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0):
        L = lgeo.solve_min_lgeodesic(flow, x, 1.0, y, tau2, audit=False).action
        lo_gap, _ = lgeo.l_sandwich(flow, x, 1.0, y, tau2)
        lo_hor, _ = lgeo.l_sandwich(flow, x, 1.0, y, tau2, exponent="horizon")
        print(f"{tau2:6.2f} {L:10.4f} {lo_gap:11.4f} {lo_hor:15.4g}  {L >= lo_gap}")


if __name__ == "__main__":
    main()

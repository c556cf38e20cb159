"""Acceptance criteria, one test per criterion.

Each test prints a PASS/FAIL line (also collected into the terminal summary)
with the measured quantity, its tolerance and the wall time.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lcoupling import cli, harness, lgeo
from lcoupling.assignment import optimal_assignment
from lcoupling.geometry import SpaceTimePoint
from lcoupling.harness import ExperimentKind, ExperimentSpec

T = 8.0
FLOWS = harness.default_flows()
SPHERE = FLOWS["sphere"]
TORUS = FLOWS["torus"]
CHECKPOINTS7 = tuple(1.0 + 0.125 * k for k in range(8))


def report(n, ok, detail, t0, budget=None):
    dt = time.perf_counter() - t0
    within = budget is None or dt <= budget
    tag = "PASS" if ok and within else "FAIL"
    line = f"C{n:<2d} {tag}  {detail}  [{dt:.1f} s"
    line += f" / budget {budget:.0f} s]" if budget else "]"
    if ok and not within:
        line += "  (over runtime budget)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok and within


def _configs(flow, n, seed, tb2=4.0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        x, y, t = harness._pair(flow, rng, 1.0, tb2)
        out.append((x, y, t))
    return out


def test_c1_flat_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(50):
        x, y = harness.random_point(TORUS, rng), harness.random_point(TORUS, rng)
        t1, t2 = np.sort(1.0 + 7.0 * rng.random(2))
        r = lgeo.solve_min_lgeodesic(TORUS, x, t1, y, t2)
        rho = TORUS.rho(T, x, y)
        ref = rho**2 / (2.0 * (math.sqrt(t2) - math.sqrt(t1)))
        worst = max(worst, abs(r.action - ref) / (1.0 + rho**2))
    ok = worst <= 1e-6
    assert report(1, ok, f"flat L oracle: max |L - rho^2/(2 ds)|/(1+rho^2) = {worst:.2e} (tol 1e-6)",
                  t0, 10.0)


def test_c2_curvature_evolution():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst_a, worst_fd = 0.0, 0.0
    for name, flow in FLOWS.items():
        for _ in range(100):
            x = harness.random_point(flow, rng)
            tau = harness._tau_sample(flow, rng)
            pk = flow.curvature_pack(SpaceTimePoint(x, tau))
            if flow.curved_dim:
                # analytic tau-derivative of R = kappa d(d-1)/a(tau)
                d, k = flow.curved_dim, flow.kappa
                dR = -k * d * (d - 1) * 2.0 * k * (d - 1) / float(flow.scale(tau)) ** 2
                worst_a = max(worst_a, abs(dR + pk.laplacian_scalar + 2.0 * pk.ricci_norm2))
            _, dR_fd = harness._fd_pack(flow, x, tau)
            lap = harness._fd_laplacian_R(flow, x, tau)
            worst_fd = max(worst_fd, abs(dR_fd + lap + 2.0 * pk.ricci_norm2))
    ok = worst_a <= 1e-8 and worst_fd <= 1e-6
    assert report(2, ok, f"dR/dtau = -Delta R - 2|Ric|^2: analytic {worst_a:.1e} (tol 1e-8), "
                         f"finite-difference {worst_fd:.1e} (tol 1e-6)", t0, 5.0)


def test_c3_transport_isometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst = 0.0
    for k in range(100):
        flow = list(FLOWS.values())[k % 4]
        x, y = harness.random_point(flow, rng), harness.random_point(flow, rng)
        r = lgeo.solve_min_lgeodesic(flow, x, 1.0, y, 4.0, N=256)
        F = flow.section_frame(1.0, x)
        worst = max(worst, lgeo.transport_map(r.curve, F).gram_drift())
    ratios = []
    for k in range(5):
        x = harness.random_point(SPHERE, rng)
        Z = rng.standard_normal(2)
        Z *= (1.0 + k * 0.3) / math.sqrt(float(SPHERE.norm2(1.0, x.coords, Z)))
        F = SPHERE.section_frame(1.0, x)
        d1, d2 = (lgeo.transport_map(lgeo.shoot(SPHERE, x, 1.0, Z, T, N=n), F).gram_drift()
                  for n in (256, 512))
        ratios.append(d1 / d2)
    ok = worst <= 1e-7 and all(8.0 <= q <= 32.0 for q in ratios)
    assert report(3, ok, f"transport Gram drift max {worst:.1e} (tol 1e-7); N->2N ratios "
                         f"{min(ratios):.1f}..{max(ratios):.1f} (want 8..32)", t0, 60.0)


def test_c4_first_variation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)
    worst, worst_half = 0.0, 0.0
    for x, y, t in _configs(SPHERE, 50, 104):
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        fv = lgeo.first_variation_check(SPHERE, 1.0, 4.0, t, x, y, u)
        scale = max(abs(fv.finite_difference), 1e-3)
        worst = max(worst, abs(fv.formula - fv.finite_difference) / scale)
        worst_half = max(worst_half,
                            abs(fv.formula_half - fv.finite_difference) / scale)
    ok = worst <= 1e-3
    assert report(4, ok, f"first variation rel err {worst:.1e} (tol 1e-3; formula without "
                         f"the factor 2: {worst_half:.2f})", t0, 120.0)


def test_c5_dlambda_dt():
    t0 = time.perf_counter()
    w_forms, w_fd = 0.0, 0.0
    for x, y, t in _configs(SPHERE, 50, 105):
        r = lgeo.solve_min_lgeodesic(SPHERE, x, t, y, 4.0 * t)
        dl = lgeo.dLambda_dt(SPHERE, 1.0, 4.0, t, r)
        fd = harness.dlambda_fd(SPHERE, 1.0, 4.0, t, x, y)
        s = max(abs(fd), 1e-3)
        w_forms = max(w_forms, abs(dl.boundary - dl.integral) / s)
        w_fd = max(w_fd, abs(dl.boundary - fd) / s, abs(dl.integral - fd) / s)
    ok = w_forms <= 1e-4 and w_fd <= 1e-3
    assert report(5, ok, f"dLambda/dt boundary vs integral {w_forms:.1e} (tol 1e-4), "
                         f"vs finite differences {w_fd:.1e} (tol 1e-3)", t0, 120.0)


def test_c6_hessian_bound():
    t0 = time.perf_counter()
    rng = np.random.default_rng(106)
    n = skipped = 0
    worst_h = worst_c = -math.inf
    while n < 50:
        x, y, t = harness._pair(SPHERE, rng)
        r = lgeo.solve_min_lgeodesic(SPHERE, x, t, y, 4.0 * t)
        if r.multiplicity_hint != 1:
            skipped += 1
            continue
        hr = lgeo.hessian_bound_check(SPHERE, 1.0, 4.0, t, x, y)
        worst_h = max(worst_h, (hr.lhs - hr.rhs) / (1.0 + abs(hr.rhs)))
        worst_c = max(worst_c, (hr.combined_lhs - hr.combined_rhs)
                      / (1.0 + abs(hr.combined_rhs)))
        n += 1
    ok = worst_h <= 1e-3 and worst_c <= 1e-3
    assert report(6, ok, f"Hessian bound: max (LHS-RHS)/(1+|RHS|) = {worst_h:.2e}, combined "
                         f"{worst_c:.2e} (tol 1e-3; {skipped} cut-locus draws skipped)",
                  t0, 600.0)


def _supermartingale(flow, replicas, solver, seed):
    spec = ExperimentSpec(ExperimentKind.SUPERMARTINGALE, flow, checkpoints=CHECKPOINTS7,
                          replicas=replicas, eps=0.05, x0=(0.0, 0.0), y0=(0.5, 0.0),
                          seed=seed, solver=solver)
    return harness.run_experiment(spec)


def _pairs_line(rep):
    pairs = rep.criteria[0]["pairs"]
    worst = max(p["mean_diff"] / p["se_diff"] for p in pairs if p["se_diff"] > 0)
    crit = {c["name"]: c["ok"] for c in rep.criteria}
    return worst, crit


@pytest.mark.slow
def test_c7_supermartingale_flat():
    t0 = time.perf_counter()
    rep = _supermartingale(TORUS, 10_000, "closed", 7)
    worst, crit = _pairs_line(rep)
    means = " ".join(f"{c['mean']:.4f}" for c in rep.checkpoints)
    assert report(7, rep.passed, f"flat supermartingale, 1e4 replicas: max mean/SE of paired "
                                 f"increments {worst:+.2f} (band +2); Theta means {means}; "
                                 f"{crit}", t0, 1800.0)


@pytest.mark.slow
def test_c7_supermartingale_sphere():
    t0 = time.perf_counter()
    rep = _supermartingale(SPHERE, 2000, "shoot", 7)
    worst, crit = _pairs_line(rep)
    means = " ".join(f"{c['mean']:.4f}" for c in rep.checkpoints)
    assert report(7, rep.passed, f"sphere supermartingale, 2e3 replicas: max mean/SE of paired "
                                 f"increments {worst:+.2f} (band +2); Theta means {means}; "
                                 f"{crit}", t0, 4 * 3600.0)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["torus", "sphere"])
def test_c8_sigma_inequality(name):
    t0 = time.perf_counter()
    flow = FLOWS[name]
    spec = ExperimentSpec(ExperimentKind.SIGMA, flow, eps=0.05, x0=(0.0, 0.0), y0=(0.5, 0.0),
                          seed=8, solver="closed" if name == "torus" else "shoot",
                          states=50, draws=10_000, state_steps=300)
    rep = harness.run_experiment(spec)
    c = rep.criteria[0]
    assert report(8, rep.passed, f"{name} Sigma-bar <= rhs + 3SE at {c['fraction']:.0%} of "
                                 f"{len(rep.checkpoints)} states (need 95%); max |E Sigma - rhs| "
                                 f"{rep.diagnostics['max_abs_expectation_gap']:.1e}", t0, 1800.0)


@pytest.mark.slow
def test_c9_transport_cost():
    t0 = time.perf_counter()
    spec = ExperimentSpec(ExperimentKind.TRANSPORT, TORUS,
                          checkpoints=tuple(1.0 + 0.1 * k for k in range(6)), eps=0.05,
                          x0=(0.0, 0.0), y0=(0.5, 0.0), seed=9, solver="closed",
                          points=256, batches=20)
    rep = harness.run_experiment(spec)
    worst, _ = _pairs_line(rep)
    means = " ".join(f"{c['mean']:.4f}" for c in rep.checkpoints)
    assert report(9, rep.passed, f"transport cost n=256 B=20: max mean/SE of paired increments "
                                 f"{worst:+.2f} (band +2); Theta-bar {means}", t0, 1200.0)


def test_c10_assignment():
    t0 = time.perf_counter()
    rng = np.random.default_rng(110)
    perms = np.array(list(itertools.permutations(range(8))))
    mismatches = 0
    for _ in range(100):
        C = rng.integers(0, 1000, size=(8, 8)).astype(float)
        ec = optimal_assignment(C)
        best = C[np.arange(8), perms].sum(axis=1).min()
        mismatches += int(C[np.arange(8), ec.permutation].sum() != best)
    assert report(10, mismatches == 0, f"assignment vs 8! brute force: {mismatches} mismatches "
                                       f"in 100", t0, 5.0)


def test_c12_determinism(tmp_path):
    t0 = time.perf_counter()
    outs = []
    for w in (1, 8):
        d = tmp_path / f"w{w}"
        code = cli.main(["experiment", "--seed", "12", "--workers", str(w), "--out", str(d),
                         "--set", "experiment.replicas=200"])
        assert code in (cli.EXIT_OK, cli.EXIT_ASSERT)
        outs.append((d / "report.json").read_bytes())
    ok = outs[0] == outs[1] and json.loads(outs[0])["diagnostics"]["replicas"] == 200
    assert report(12, ok, "report.json byte-identical for 1 and 8 workers", t0)


def test_c11_bound_audit():
    t0 = time.perf_counter()
    a = lgeo.bound_audit
    ok = a.checked > 0 and not a.violations
    assert report(11, ok, f"sandwich and velocity bounds on {a.checked} solved geodesics: "
                          f"{len(a.violations)} violations", t0)

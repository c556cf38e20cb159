import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from lcoupling import harness
from lcoupling.geometry import (FlowKind, FlowManifold, GeometryError, Point,
                                SpaceTimePoint, gram_schmidt, h_form,
                                h_form_bilinear_nodes, h_form_nodes,
                                metric_comparison_bound)


# ---- symbolic oracle ---------------------------------------------------------

def _symbolic_curvature(dc, kappa, a):
    u = sp.symbols(f"u0:{dc}", real=True)
    q = 1 + kappa * sum(ui**2 for ui in u)
    F = a * 4 / q**2
    g = sp.diag(*([F] * dc))
    gi = g.inv()
    Gam = [[[sp.cancel(sum(gi[k, l] * (sp.diff(g[j, l], u[i]) + sp.diff(g[i, l], u[j])
                                       - sp.diff(g[i, j], u[l])) for l in range(dc)) / 2)
             for j in range(dc)] for i in range(dc)] for k in range(dc)]

    def Rup(m, i, j, l):
        e = sp.diff(Gam[m][j][l], u[i]) - sp.diff(Gam[m][i][l], u[j])
        e += sum(Gam[m][i][p] * Gam[p][j][l] - Gam[m][j][p] * Gam[p][i][l] for p in range(dc))
        return e

    R4 = sp.MutableDenseNDimArray.zeros(dc, dc, dc, dc)
    for i in range(dc):
        for j in range(dc):
            for k in range(dc):
                for l in range(dc):
                    R4[i, j, k, l] = sum(g[k, m] * Rup(m, i, j, l) for m in range(dc))
    Ric = sp.Matrix(dc, dc, lambda j, l: sum(Rup(m, m, j, l) for m in range(dc)))
    scal = sum(gi[j, l] * Ric[j, l] for j in range(dc) for l in range(dc))
    flat = [Gam[k][i][j] for k in range(dc) for i in range(dc) for j in range(dc)]
    flat += list(R4.reshape(dc**4))
    flat += list(Ric) + [scal]
    f = sp.lambdify(u, flat, "numpy")

    def evaluate(*x):
        v = np.array(f(*x), dtype=float)
        n3, n4 = dc**3, dc**4
        return (v[:n3].reshape(dc, dc, dc), v[n3:n3 + n4].reshape((dc,) * 4),
                v[n3 + n4:n3 + n4 + dc * dc].reshape(dc, dc), v[-1])

    return evaluate


@pytest.mark.parametrize("kind,dc", [("sphere", 2), ("sphere", 3), ("hyp", 2), ("hyp", 3)])
def test_curvature_matches_symbolic(kind, dc):
    if kind == "sphere":
        flow = FlowManifold.round_sphere(dc, 1.3)
        kappa = 1
    else:
        flow = FlowManifold.hyperbolic(dc, 40.0)
        kappa = -1
    tau = 2.7
    a = float(flow.scale(tau))
    f = _symbolic_curvature(dc, kappa, sp.Integer(1))
    rng = np.random.default_rng(1)
    for _ in range(5):
        u = rng.uniform(-0.5, 0.5, dc)
        G, R4, Ric, scal = f(*u)
        # scaling the metric by a: Gamma and Ric unchanged, Rm_ijkl * a, R / a
        R4, scal = a * R4, scal / a
        pk = flow.curvature_pack(SpaceTimePoint(Point(u), tau))
        np.testing.assert_allclose(pk.christoffel, np.array(G, dtype=float), atol=1e-12)
        np.testing.assert_allclose(pk.riemann, np.array(R4, dtype=float), atol=1e-10)
        np.testing.assert_allclose(pk.ricci, np.array(Ric, dtype=float), atol=1e-10)
        assert pk.scalar == pytest.approx(float(scal), rel=1e-12)


def test_flow_equation_fd(any_flow, rng):
    for _ in range(10):
        x = harness.random_point(any_flow, rng)
        tau = rng.uniform(1.5, 7.5)
        h = 1e-5
        dg = (any_flow.metric(x, tau + h) - any_flow.metric(x, tau - h)) / (2 * h)
        pk = any_flow.curvature_pack(SpaceTimePoint(x, tau))
        np.testing.assert_allclose(dg, 2 * pk.ricci, atol=1e-7)


def test_scalar_evolution_fd(any_flow):
    # dR/dtau = -Delta R - 2|Ric|^2
    for tau in (1.5, 4.0, 7.5):
        h = 1e-5
        dR = (float(any_flow.scalar_curvature(tau + h))
              - float(any_flow.scalar_curvature(tau - h))) / (2 * h)
        assert dR == pytest.approx(-2 * float(any_flow.ricci_norm2(tau)), abs=1e-6)


def test_hyperbolic_extinction():
    with pytest.raises(GeometryError, match="degenerate"):
        FlowManifold.hyperbolic(2, 1.0, 1.0, 8.0)


def test_time_out_of_range(sphere):
    with pytest.raises(GeometryError):
        sphere.scale(9.0)
    with pytest.raises(GeometryError):
        sphere.metric(Point([0.0, 0.0]), 0.5)


def test_json_roundtrip(any_flow):
    obj = any_flow.to_json()
    back = FlowManifold.from_json(obj)
    assert back.to_json() == obj
    assert back.kind is FlowKind(obj["kind"])


# ---- charts ------------------------------------------------------------------

def test_switch_chart_preserves_vectors(sphere, rng):
    for _ in range(20):
        u = rng.uniform(-1.5, 1.5, 2)
        x = Point(u, int(rng.integers(2)))
        V = rng.standard_normal((3, 2))
        y, W = sphere.switch_chart(x, V)
        # the chart map is an isometry of the same metric
        np.testing.assert_allclose(sphere.norm2(2.0, y.coords, W),
                                   sphere.norm2(2.0, x.coords, V), rtol=1e-12)
        np.testing.assert_allclose(sphere.embed(y), sphere.embed(x), atol=1e-12)
        # pushforward equals the derivative of the embedding
        np.testing.assert_allclose(sphere.embed_vector(y, W), sphere.embed_vector(x, V),
                                   atol=1e-12)
        z, V2 = sphere.switch_chart(y, W)
        np.testing.assert_allclose(z.coords, x.coords, rtol=1e-12)
        np.testing.assert_allclose(V2, V, rtol=1e-10, atol=1e-12)


def test_switch_chart_single_vector(sphere):
    x = Point([0.8, -1.0], 0)
    v = np.array([0.01, -0.11])
    _, W = sphere.to_chart(x, 1, v)
    u = x.coords
    uu = u @ u
    np.testing.assert_allclose(W, v / uu - 2 * u * (u @ v) / uu**2)


def test_canonical(product):
    x = Point([3.0, 0.5, 5.3], 0)
    c = product.canonical(x)
    assert c.chart == 1
    assert np.sum(c.coords[:2] ** 2) <= 1.0
    assert c.coords[2] == pytest.approx(1.3)


# ---- exp, log, rho -------------------------------------------------------------

def test_exp_matches_rk4(any_flow, rng):
    for _ in range(10):
        x = harness.random_point(any_flow, rng)
        tau = rng.uniform(1, 8)
        v = rng.standard_normal(any_flow.dim) * 0.3
        a = any_flow.exp(tau, x, v)
        b = any_flow.exp_rk4(tau, x, v, 256)
        assert any_flow.rho(8.0, a, b) < 1e-9


def test_exp_log_roundtrip(any_flow, rng):
    for _ in range(20):
        x = harness.random_point(any_flow, rng)
        y = harness.random_point(any_flow, rng)
        tau = rng.uniform(1, 8)
        v = any_flow.log(tau, x, y)
        assert math.sqrt(float(any_flow.norm2(tau, x.coords, v))) == pytest.approx(
            any_flow.rho(tau, x, y), rel=1e-9, abs=1e-12)
        if any_flow.kappa > 0 and any_flow.rho(tau, x, y) > 0.99 * math.pi * math.sqrt(
                float(any_flow.scale(tau))):
            continue
        assert any_flow.rho(tau, any_flow.exp(tau, x, v), y) < 1e-9


def test_sphere_step_too_large(sphere):
    with pytest.raises(GeometryError, match="too large"):
        sphere.exp(1.0, Point([0.0, 0.0]), np.array([2.0, 0.0]))


def test_rho_sphere_closed_form(sphere):
    # points on the equator separated by angle pi/2
    x = Point([1.0, 0.0])
    y = Point([0.0, 1.0])
    for tau in (1.0, 3.0):
        assert sphere.rho(tau, x, y) == pytest.approx(
            math.sqrt(float(sphere.scale(tau))) * math.pi / 2, rel=1e-12)


coords = st.floats(-0.9, 0.9)


@given(st.tuples(coords, coords), st.tuples(coords, coords), st.tuples(coords, coords))
def test_rho_metric_axioms(a, b, c):
    flow = FlowManifold.hyperbolic(2, 30.0)
    x, y, z = Point(np.array(a) * 0.7), Point(np.array(b) * 0.7), Point(np.array(c) * 0.7)
    dxy = flow.rho(3.0, x, y)
    assert dxy == pytest.approx(flow.rho(3.0, y, x), rel=1e-12, abs=1e-14)
    assert dxy <= flow.rho(3.0, x, z) + flow.rho(3.0, z, y) + 1e-12


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2),
       st.lists(st.floats(-10, 10), min_size=2, max_size=2))
def test_torus_rho_periodic(a, b):
    flow = FlowManifold.flat_torus(2, [4.0, 4.0])
    x, y = Point(a), Point(b)
    shifted = Point(np.array(b) + np.array([4.0, -8.0]))
    assert flow.rho(2.0, x, y) == pytest.approx(flow.rho(2.0, x, shifted), abs=1e-9)
    assert flow.rho(2.0, x, y) <= math.sqrt(8.0) + 1e-12


def test_geodesic_path_constant_speed(any_flow, rng):
    x = harness.random_point(any_flow, rng)
    v = rng.standard_normal(any_flow.dim) * 0.4
    sig = np.linspace(0, 1, 33)
    pts, ch = any_flow.geodesic_path(x, v, sig)
    # chord lengths of equal parameter steps agree
    steps = [any_flow.rho(2.0, Point(pts[i], ch), Point(pts[i + 1], ch)) for i in range(32)]
    np.testing.assert_allclose(steps, steps[0], rtol=1e-9)


# ---- frames ------------------------------------------------------------------

def test_gram_schmidt(any_flow, rng):
    x = harness.random_point(any_flow, rng)
    V = rng.standard_normal((any_flow.dim, any_flow.dim))
    W = gram_schmidt(any_flow, 2.0, x, V)
    np.testing.assert_allclose(W @ any_flow.metric(x, 2.0) @ W.T, np.eye(any_flow.dim),
                               atol=1e-12)
    F = any_flow.section_frame(2.0, x)
    np.testing.assert_allclose(F, gram_schmidt(any_flow, 2.0, x, np.eye(any_flow.dim)),
                               atol=1e-12)


def test_gram_schmidt_dependent(sphere):
    with pytest.raises(GeometryError):
        gram_schmidt(sphere, 2.0, Point([0.1, 0.2]), [[1.0, 2.0], [2.0, 4.0]])


# ---- H form and bounds ---------------------------------------------------------

def test_h_form_vectorized_matches_tensor(any_flow, rng):
    n = 6
    taus = rng.uniform(1, 8, n)
    xs = np.array([harness.random_point(any_flow, rng).coords for _ in range(n)])
    gd = rng.standard_normal((n, any_flow.dim))
    Z = rng.standard_normal((n, 3, any_flow.dim))
    fast = h_form_nodes(any_flow, taus, xs, gd, Z)
    bil = h_form_bilinear_nodes(any_flow, taus, xs, gd, Z)
    for i in range(n):
        for j in range(3):
            ref = h_form(any_flow, SpaceTimePoint(Point(xs[i]), taus[i]), gd[i], Z[i, j])
            assert fast[i, j] == pytest.approx(ref, rel=1e-10, abs=1e-12)
            assert bil[i, j, j] == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_metric_comparison(any_flow, rng):
    for _ in range(20):
        x = harness.random_point(any_flow, rng)
        t1, t2 = sorted(rng.uniform(1, 8, 2))
        v = rng.standard_normal(any_flow.dim)
        lo, hi = metric_comparison_bound(any_flow, t1, t2, x, v)
        n1 = float(any_flow.norm2(t1, x.coords, v))
        assert lo * (1 - 1e-12) <= n1 <= hi * (1 + 1e-12)


def test_c0_bounds_curvature(any_flow):
    for tau in np.linspace(1, 8, 8):
        pk = any_flow.curvature_pack(SpaceTimePoint(Point(np.zeros(any_flow.dim)), tau))
        ric = math.sqrt(float(pk.ricci_norm2))
        rm = math.sqrt(float(np.einsum("ia,jb,kc,ld,ijkl,abcd->", pk.ginv, pk.ginv,
                                       pk.ginv, pk.ginv, pk.riemann, pk.riemann)))
        assert max(ric, rm) <= any_flow.C0 * (1 + 1e-12)

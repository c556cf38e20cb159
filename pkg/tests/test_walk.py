import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lcoupling import lgeo, walk
from lcoupling.geometry import FlowManifold, Point
from lcoupling.walk import (WalkConfig, run_coupled_walk, run_single_walk,
                            sample_uniform_ball, sample_uniform_ball_batch,
                            sigma_form, theta_floor)


def _cfg(flow, **kw):
    base = dict(tb1=1.0, tb2=4.0, s_start=1.0, eps=0.05, x0=(0.0, 0.0),
                y0=(0.5, 0.0), seed=3, max_steps=20)
    base.update(kw)
    if flow.curved_dim == 0 and "solver" not in kw:
        base["solver"] = "closed"
    return WalkConfig(flow, **base)


# ---- sampling ---------------------------------------------------------------

@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_ball_sample_inside(dim, seed):
    v = sample_uniform_ball(dim, np.random.default_rng(seed))
    assert v.shape == (dim,)
    assert v @ v <= 1.0


def test_ball_second_moment():
    # E[lam lam^T] = Id / (d + 2) for the uniform unit ball
    for d in (1, 2, 3):
        lam = sample_uniform_ball_batch(d, 200_000, np.random.default_rng(d))
        M = lam.T @ lam / len(lam)
        assert np.allclose(M * (d + 2), np.eye(d), atol=0.02)
        # radial law P(|lam| <= r) = r^d
        r = np.linalg.norm(lam, axis=1)
        assert np.mean(r <= 0.5) == pytest.approx(0.5**d, abs=0.005)


def test_replica_streams_independent_of_order():
    a = walk.replica_rng(5, 7).random(3)
    walk.replica_rng(5, 6).random(100)
    b = walk.replica_rng(5, 7).random(3)
    c = walk.replica_rng(5, 8).random(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


# ---- configuration ----------------------------------------------------------

def test_config_validation(torus, sphere):
    with pytest.raises(ValueError):
        _cfg(torus, eps=0.0)
    with pytest.raises(ValueError):
        _cfg(torus, tb1=4.0, tb2=1.0)
    with pytest.raises(ValueError):
        _cfg(torus, max_steps=-1)
    with pytest.raises(ValueError):
        _cfg(torus, s_start=0.5)
    with pytest.raises(ValueError):
        _cfg(torus, max_steps=500)  # runs past T
    with pytest.raises(ValueError):
        _cfg(sphere, solver="closed")


# ---- coupled walk -----------------------------------------------------------

def test_zero_steps_single_row(torus):
    p = run_coupled_walk(_cfg(torus, max_steps=0))
    assert len(p) == 1
    assert p.Lambda[0] == pytest.approx(0.25 / 2.0)
    assert math.isnan(p.zeta[0])
    assert len(p.to_csv().strip().splitlines()) == 2


def test_walk_is_deterministic(sphere):
    a = run_coupled_walk(_cfg(sphere, max_steps=6))
    b = run_coupled_walk(_cfg(sphere, max_steps=6))
    assert a.to_csv() == b.to_csv()
    c = run_coupled_walk(_cfg(sphere, max_steps=6, seed=4))
    assert c.to_csv() != a.to_csv()


def test_checkpoint_rows_are_a_subset(torus):
    full = run_coupled_walk(_cfg(torus))
    part = run_coupled_walk(_cfg(torus), checkpoints=[0, 5, 20])
    assert part.t == [full.t[k] for k in (0, 5, 20)]
    assert part.Theta == [full.Theta[k] for k in (0, 5, 20)]


def test_flat_coupling_is_translation(torus):
    # the identity transport keeps Y - X fixed on the flat torus, up to the
    # sqrt(tb2/tb1) scaling of the increments
    p = run_coupled_walk(_cfg(torus, tb1=1.0, tb2=1.0 + 1e-9, max_steps=10))
    D = np.array(p.Y) - np.array(p.X)
    D = D - np.round(D / 4.0) * 4.0
    assert np.allclose(D, D[0], atol=1e-6)


def test_increment_isometry_and_floor(sphere):
    p = run_coupled_walk(_cfg(sphere, max_steps=10))
    assert max(p.iso_dev) <= 1e-8
    for t, th in zip(p.t, p.Theta):
        assert th >= theta_floor(sphere, 1.0, 4.0, t)
    assert not any(f & walk.FLAG_ISOMETRY for f in p.flags)


def test_time_grid(torus):
    cfg = _cfg(torus, s_start=1.25, eps=0.1, max_steps=30)
    p = run_coupled_walk(cfg)
    assert p.t[0] == 1.25
    assert np.allclose(np.diff(p.t), 0.01)


# ---- marginal walk ----------------------------------------------------------

def test_flat_heat_variance():
    # Cov of the position after n steps is 2 tb eps^2 n Id
    flow = FlowManifold.flat_torus(2, [1000.0, 1000.0], 1.0, 8.0)
    tb, eps, n, paths = 1.5, 0.1, 40, 5000
    ends = np.array([run_single_walk(flow, tb, 1.0, eps, [500.0, 500.0], seed=11,
                                     max_steps=n, replica=r, checkpoints=[n]).X[0]
                     for r in range(paths)])
    var = ends.var(axis=0, ddof=1).mean()
    assert var == pytest.approx(2.0 * tb * eps**2 * n, rel=0.05)


# ---- one-step expansion of Lambda -------------------------------------------

def _step_residuals(flow, epss, t=1.2):
    X, Y = Point([0.1, 0.2]), Point([-0.3, 0.1])
    lam = np.array([0.5, -0.3])
    res = lgeo.solve_min_lgeodesic(flow, X, t, Y, 4 * t)
    sig = sigma_form(flow, 1.0, 4.0, t, res).values(lam[None])[0]
    out = []
    for eps in epss:
        cfg = WalkConfig(flow, 1.0, 4.0, t, eps, tuple(X.coords), tuple(Y.coords),
                         max_steps=1)
        Xn, Yn, z, _, _ = walk.coupled_step(flow, X, Y, t, lam, cfg)
        tn = t + eps * eps
        Ln = lgeo.solve_min_lgeodesic(flow, Xn, tn, Yn, 4 * tn, audit=False).action
        out.append(Ln - res.action - eps * z)
    return np.array(out), sig


@pytest.mark.parametrize("name", ["torus", "sphere", "hyperbolic"])
def test_increment_is_first_order_zeta(name):
    from conftest import ALL_FLOWS
    flow = ALL_FLOWS[name]()
    epss = np.array([0.02, 0.01, 0.005])
    r, sig = _step_residuals(flow, epss)
    # Lambda' - Lambda - eps zeta = O(eps^2)
    assert 3.0 < r[0] / r[1] < 5.0
    assert 3.0 < r[1] / r[2] < 5.0
    second = 2 * r[2] / epss[2] ** 2 - r[1] / epss[1] ** 2  # Richardson
    if flow.curved_dim:
        assert second <= sig + 1e-3
    else:
        assert second == pytest.approx(sig, abs=1e-3)


# ---- Sigma ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["torus", "sphere", "hyperbolic", "product"])
def test_sigma_expectation_equals_rhs(name):
    from conftest import ALL_FLOWS
    flow = ALL_FLOWS[name]()
    dc = flow.curved_dim
    x = Point([0.1, 0.2][:dc] + [0.5, 0.3][:flow.flat_dim])
    y = Point([-0.3, 0.1][:dc] + [1.1, -0.4][:flow.flat_dim])
    t = 1.3
    res = lgeo.solve_min_lgeodesic(flow, x, t, y, 4 * t)
    sf = sigma_form(flow, 1.0, 4.0, t, res)
    assert sf.expectation == pytest.approx(sf.rhs, abs=1e-7 * (1 + abs(sf.rhs)))
    lams = sample_uniform_ball_batch(flow.dim, 40_000, np.random.default_rng(0))
    v = sf.values(lams)
    assert abs(v.mean() - sf.expectation) <= 4 * v.std() / math.sqrt(len(v))
    # the bare boundary term gives a smaller quantity
    assert np.mean(sf.values_bare(lams)) <= v.mean() + 1e-12

"""L-functional, minimal L-geodesics and space-time parallel transport.

Curves are parametrized by s = sqrt(tau) with X(s) = gamma(s^2).  In this
variable

    L = int ( |X'|^2_{g(s^2)} / 2 + 2 s^2 R ) ds,
    nabla_{X'} X' = 2 s^2 grad R - 4 s Ric#(X'),       X'(sqrt(tau1)) = 2 Z,
    dZ/ds + Gamma(X', Z) = -2 s Ric#(Z)                 (space-time transport),

and gamma_dot(tau) = X'(s) / (2 s).
"""

from __future__ import annotations

import functools
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy import integrate as sint
from scipy import linalg as sla

from lcoupling import _kernels
from lcoupling.geometry import (
    FlowManifold,
    GeometryError,
    Point,
    SpaceTimePoint,
    TangentVec,
    as_point,
    gram_schmidt,
    h_form_nodes,
)

DEFAULT_N = 256
MIN_N = 16
POLY_N = 64
POLY_MAXIT = 500
RESIDUAL_TOL = 1e-7
NEAR_TIE = 1e-6


class SolverError(RuntimeError):
    """A boundary-value solve or a curve integration failed."""


# --------------------------------------------------------------------------
# curves


@dataclass(frozen=True, eq=False)
class LCurve:
    flow: FlowManifold
    s_grid: np.ndarray
    points: np.ndarray
    charts: np.ndarray
    tau1: float
    tau2: float
    velocity: np.ndarray | None = None  # dX/ds, same chart as the node

    def __post_init__(self):
        s = np.asarray(self.s_grid, dtype=float)
        if s.size < MIN_N + 1:
            raise ValueError(f"an LCurve needs at least {MIN_N} intervals")
        if np.any(np.diff(s) <= 0):
            raise ValueError("s grid must be strictly increasing")
        f = self.flow
        if not (f.tau_min - 1e-12 <= self.tau1 < self.tau2 <= f.tau_max + 1e-12):
            raise ValueError("endpoint times outside the flow interval")
        if self.points.shape != (s.size, f.dim):
            raise ValueError("points do not match the grid")

    @property
    def N(self) -> int:
        return self.s_grid.size - 1

    @property
    def taus(self) -> np.ndarray:
        return self.s_grid**2

    def point(self, i) -> Point:
        return Point(self.points[i], int(self.charts[i]))

    @property
    def start(self) -> Point:
        return self.point(0)

    @property
    def end(self) -> Point:
        return self.flow.canonical(self.point(-1))

    def velocities(self) -> np.ndarray:
        return self.velocity if self.velocity is not None else curve_velocity(self)

    def gamma_dot(self) -> np.ndarray:
        """d gamma / d tau at every node (node chart)."""
        return self.velocities() / (2.0 * self.s_grid[:, None])

    def to_json(self) -> dict:
        return {"tau1": self.tau1, "tau2": self.tau2,
                "s_grid": self.s_grid.tolist(),
                "points": self.points.tolist(),
                "charts": [int(c) for c in self.charts]}


@dataclass(frozen=True, eq=False)
class LGeodesicResult:
    curve: LCurve
    action: float
    initial_Z: TangentVec
    converged: bool
    multiplicity_hint: int
    residual: float = 0.0
    candidate_actions: tuple = ()
    bound_violations: tuple = ()

    @property
    def flow(self) -> FlowManifold:
        return self.curve.flow

    def to_json(self) -> dict:
        return {"action": self.action,
                "Z": self.initial_Z.components.tolist(),
                "Z_chart": self.initial_Z.base.x.chart,
                "converged": self.converged,
                "multiplicity_hint": self.multiplicity_hint,
                "residual": self.residual,
                "curve": self.curve.to_json()}


@dataclass(frozen=True, eq=False)
class TransportMap:
    source: np.ndarray  # (m, d) at (x, tau1), start chart
    target: np.ndarray  # (m, d) at (y, tau2), chart of the curve end
    along: LCurve
    history: np.ndarray | None = None  # (N+1, m, d), node charts

    def gram_drift(self) -> float:
        c = self.along
        f = c.flow
        g1 = f.metric(c.point(0), c.tau1)
        g2 = f.metric(c.point(-1), c.tau2)
        G1 = self.source @ g1 @ self.source.T
        G2 = self.target @ g2 @ self.target.T
        return float(np.max(np.abs(G2 - G1)))


class _BoundAudit:
    """Counts solved geodesics and violations of the a-priori bounds."""

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with getattr(self, "_lock", threading.Lock()):
            self.checked = 0
            self.violations = []

    def record(self, violations):
        with self._lock:
            self.checked += 1
            self.violations.extend(violations)


bound_audit = _BoundAudit()


# --------------------------------------------------------------------------
# L-functional


_W_CENTRAL = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0
_W_END = (np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0,
          np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0)


def curve_velocity(curve: LCurve) -> np.ndarray:
    """dX/ds at each node by 4th-order finite differences.

    Stencil points are moved into the chart of the centre node first.
    """
    flow = curve.flow
    P, ch = curve.points, curve.charts
    n = P.shape[0]
    h = curve.s_grid[1] - curve.s_grid[0]
    out = np.empty_like(P)
    out[2:-2] = (_W_CENTRAL[0] * P[:-4] + _W_CENTRAL[1] * P[1:-3]
                 + _W_CENTRAL[2] * P[3:-1] + _W_CENTRAL[3] * P[4:]) / h
    ends = [(0, np.arange(5), _W_END[0]), (1, np.arange(5), _W_END[1]),
            (n - 1, n - 1 - np.arange(5), -_W_END[0]),
            (n - 2, n - 1 - np.arange(5), -_W_END[1])]
    for i, idx, ws in ends:
        out[i] = ws @ P[idx] / h
    if np.all(ch == ch[0]):
        return out
    for i in range(n):
        idx = (np.arange(5) if i < 2 else n - 1 - np.arange(5) if i > n - 3
               else i + np.array([-2, -1, 1, 2]))
        if np.all(ch[idx] == ch[i]):
            continue
        pts = P[idx].copy()
        for r, k in enumerate(idx):
            if ch[k] != ch[i]:
                pts[r] = flow.switch_chart(Point(P[k], ch[k])).coords
        ws = (_W_END[0] if i == 0 else _W_END[1] if i == 1
              else -_W_END[0] if i == n - 1 else -_W_END[1] if i == n - 2
              else _W_CENTRAL)
        out[i] = ws @ pts / h
    return out


def l_integrand(flow: FlowManifold, s, xs, vs) -> np.ndarray:
    """|X'|^2_{g(s^2)} / 2 + 2 s^2 R(s^2) at nodes."""
    s = np.asarray(s, dtype=float)
    tau = s * s
    return 0.5 * flow.norm2(tau, xs, vs) + 2.0 * tau * flow.scalar_curvature(tau)


def _quad_s(f, s) -> float:
    """Composite Boole rule on a uniform grid when N % 4 == 0, else Simpson."""
    n = len(s) - 1
    if n % 4 or n == 0:
        return float(sint.simpson(f, x=s))
    h = (s[-1] - s[0]) / n
    w = np.zeros(n + 1)
    for k in range(5):
        w[k:n + k - 3:4] += _BOOLE[k]
    return float(2.0 * h / 45.0 * (w @ f))


_BOOLE = np.array([7.0, 32.0, 12.0, 32.0, 7.0])


def l_action(curve: LCurve) -> float:
    """L(gamma) by composite Boole (or Simpson) quadrature in s.

    Velocities come from 4th-order finite differences of the node positions,
    so the value is independent of how the curve was produced.
    """
    v = curve_velocity(curve)
    f = l_integrand(curve.flow, curve.s_grid, curve.points, v)
    return _quad_s(f, curve.s_grid)


def l_action_parts(curve: LCurve) -> tuple:
    """(kinetic part, curvature part) of the action."""
    v = curve_velocity(curve)
    s = curve.s_grid
    kin = 0.5 * curve.flow.norm2(s * s, curve.points, v)
    pot = 2.0 * s * s * curve.flow.scalar_curvature(s * s)
    return _quad_s(kin, s), _quad_s(pot, s)


# --------------------------------------------------------------------------
# shooting and transport


def _check_times(flow: FlowManifold, tau1, tau2):
    if not tau1 < tau2:
        raise GeometryError("need tau1 < tau2")
    flow.check_tau(tau1)
    flow.check_tau(tau2)


def _integrate(flow, x: Point, p0, Z0, tau1, tau2, N, record=True):
    s1, s2 = math.sqrt(tau1), math.sqrt(tau2)
    Z0 = np.zeros((0, flow.dim)) if Z0 is None else np.atleast_2d(
        np.asarray(Z0, dtype=float))
    out = _kernels.integrate(flow.kernel_params, x.coords.copy(), x.chart,
                             np.asarray(p0, dtype=float).copy(), Z0.copy(),
                             s1, s2, int(N), 0, record)
    xs, ps, charts, Zs, A, ok = out
    if not ok:
        raise SolverError("L-geodesic integration blew up (|X'| > 1e6)")
    return xs, ps, charts, Zs, A


def shoot(flow: FlowManifold, x, tau1, Z, tau2, N=DEFAULT_N) -> LCurve:
    """L-exponential curve with lim sqrt(tau) gamma_dot = Z at tau1."""
    _check_times(flow, tau1, tau2)
    x = as_point(x)
    flow.check_chart(x)
    Z = Z.components if isinstance(Z, TangentVec) else Z
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise SolverError("non-finite initial datum")
    xs, ps, charts, _, _ = _integrate(flow, x, 2.0 * Z, None, tau1, tau2, N)
    s = np.linspace(math.sqrt(tau1), math.sqrt(tau2), N + 1)
    return LCurve(flow, s, xs, charts, float(tau1), float(tau2), ps)


def _transport_run(curve: LCurve, xi):
    flow = curve.flow
    x0 = curve.point(0)
    p0 = curve.velocities()[0]
    xs, ps, charts, Zs, _ = _integrate(flow, x0, p0, xi, curve.tau1,
                                       curve.tau2, curve.N)
    return Zs


def space_time_transport(flow: FlowManifold, curve: LCurve, xi):
    """Transport the vector(s) xi from the start of `curve` to its end.

    Returns the components at the end node (chart `curve.charts[-1]`).  The
    curve is re-integrated together with the vectors from its initial
    velocity, on the same grid.
    """
    comp = xi.components if isinstance(xi, TangentVec) else xi
    comp = np.asarray(comp, dtype=float)
    Zs = _transport_run(curve, comp)
    out = Zs[-1]
    return out[0] if comp.ndim == 1 else out


def transport_map(curve: LCurve, vectors) -> TransportMap:
    V = np.atleast_2d(np.asarray(vectors, dtype=float))
    Zs = _transport_run(curve, V)
    return TransportMap(V, Zs[-1], curve, Zs)


# --------------------------------------------------------------------------
# starts for the boundary-value problem


@dataclass
class _Start:
    label: str
    target: np.ndarray  # endpoint coords in target_chart (torus block lifted)
    target_chart: int
    v_curved: np.ndarray | None  # frozen-geodesic log vector, curved block
    theta: float  # curved-block angle / hyperbolic distance (unit metric)
    poly_chart: int = 0


def _lattice_images(flow, x: Point, y: Point, all_images=True):
    dc = flow.curved_dim
    P = np.array(flow.periods)
    diff = y.coords[dc:] - x.coords[dc:]
    base = diff - np.round(diff / P) * P
    out = [base]
    if all_images:
        for i in range(flow.flat_dim):
            for sgn in (1.0, -1.0):
                e = np.zeros(flow.flat_dim)
                e[i] = sgn * P[i]
                out.append(base + e)
    return [x.coords[dc:] + b for b in out]


def _starts(flow: FlowManifold, x: Point, y: Point, tau_ref, fast=False):
    """Multistart set: lattice images for the torus block, both arcs on the sphere."""
    dc = flow.curved_dim
    y = flow.canonical(y)
    flats = _lattice_images(flow, x, y, all_images=True) if flow.flat_dim else [
        np.zeros(0)]
    if fast and flow.flat_dim:
        # keep the nearest image plus the ones that could compete (lifted distance)
        d0 = np.linalg.norm(flats[0] - x.coords[dc:])
        flats = [f for f in flats
                 if np.linalg.norm(f - x.coords[dc:]) <= d0 + 0.5 * min(flow.periods)]
    arcs = [("base", None, 0.0)]
    if dc:
        v = flow.log(tau_ref, x, y)[:dc]
        a = float(flow.scale(tau_ref))
        theta = math.sqrt(float(flow.norm2(tau_ref, x.coords, np.concatenate(
            [v, np.zeros(flow.flat_dim)]))) / a)
        arcs = [("short", v, theta)]
        if flow.kappa > 0 and theta > 1e-8 and (not fast or theta > math.pi - 0.3):
            arcs.append(("long", -v * (2 * math.pi - theta) / theta,
                         2 * math.pi - theta))
    out = []
    for lab, v, th in arcs:
        images = flats if lab != "long" else flats[:1]
        for k, f in enumerate(images):
            tgt = y.coords.copy()
            tgt[dc:] = f
            out.append(_Start(f"{lab}/{k}", tgt, y.chart, v, th))
    return out


def _shape_weights(flow, s):
    """Fraction of the curved-block path covered by time s (exact L-geodesic law)."""
    if not flow.curved_dim:
        return (s - s[0]) / (s[-1] - s[0])
    inv_a = 1.0 / flow.scale(s * s)
    cum = sint.cumulative_trapezoid(inv_a, s, initial=0.0)
    # refine with Simpson on the uniform grid via a dense evaluation
    fine = np.linspace(s[0], s[-1], 8 * (s.size - 1) + 1)
    cf = sint.cumulative_trapezoid(1.0 / flow.scale(fine * fine), fine, initial=0.0)
    cum = np.interp(s, fine, cf)
    return cum / cum[-1]


def _initial_polyline(flow, x: Point, st: _Start, s, reparam=False):
    """Frozen-geodesic polyline from x to the start's target, in one chart.

    Uniform in s unless `reparam`, in which case the curved block follows the
    exact L-geodesic speed law sigma(s) ~ int ds / a(s^2).
    """
    dc = flow.curved_dim
    lin = (s - s[0]) / (s[-1] - s[0])
    sig_c = _shape_weights(flow, s) if reparam else lin
    pts = np.empty((s.size, flow.dim))
    pts[:, dc:] = x.coords[dc:] + np.multiply.outer(lin, st.target[dc:] - x.coords[dc:])
    chart = x.chart
    if dc:
        v = np.concatenate([st.v_curved, np.zeros(flow.flat_dim)])
        path, chart = flow.geodesic_path(x, v, sig_c)
        pts[:, :dc] = path[:, :dc]
    return pts, chart


# --------------------------------------------------------------------------
# phase (a): discrete action minimization


class _Polyline:
    """Midpoint-rule discrete action on a fixed-endpoint polyline in one chart."""

    def __init__(self, flow, s):
        self.flow = flow
        self.s = s
        self.h = s[1] - s[0]
        sm = 0.5 * (s[1:] + s[:-1])
        self.a = flow.scale(sm * sm) if flow.curved_dim else np.ones(sm.size)
        self.dc = flow.curved_dim
        self.kappa = flow.kappa

    def value(self, P):
        D = np.diff(P, axis=0)
        M = 0.5 * (P[1:] + P[:-1])
        dc = self.dc
        val = 0.5 * np.sum(D[:, dc:] ** 2) / self.h
        if dc:
            u = M[:, :dc]
            w = 4.0 / (1.0 + self.kappa * np.sum(u * u, axis=1)) ** 2
            val += 0.5 * np.sum(self.a * w * np.sum(D[:, :dc] ** 2, axis=1)) / self.h
        return val

    def grad(self, P):
        D = np.diff(P, axis=0)
        M = 0.5 * (P[1:] + P[:-1])
        dc = self.dc
        gD = np.zeros_like(D)  # d value / d D_i
        gM = np.zeros_like(D)  # d value / d M_i
        gD[:, dc:] = D[:, dc:] / self.h
        if dc:
            u = M[:, :dc]
            q = 1.0 + self.kappa * np.sum(u * u, axis=1)
            w = 4.0 / q**2
            dd = np.sum(D[:, :dc] ** 2, axis=1)
            gD[:, :dc] = (self.a * w)[:, None] * D[:, :dc] / self.h
            dw = (w * (-4.0 * self.kappa) / q)[:, None] * u
            gM[:, :dc] = (0.5 * self.a * dd / self.h)[:, None] * dw
        G = np.zeros_like(P)
        G[1:] += gD + 0.5 * gM
        G[:-1] += -gD + 0.5 * gM
        return G


@functools.lru_cache(maxsize=32)
def _band_pattern(n_in, d):
    """Index arrays mapping colored gradient differences into banded storage."""
    bw = 2 * d - 1
    colors, nbs, kks, rows, cols = [], [], [], [], []
    for c in range(3 * d):
        node_mod, k = divmod(c, d)
        nodes = np.arange(node_mod, n_in, 3)
        col = nodes * d + k
        for off in (-1, 0, 1):
            nb = nodes + off
            ok = (nb >= 0) & (nb < n_in)
            for kk in range(d):
                row = nb * d + kk
                m = ok & (row >= col) & (row - col <= bw)
                colors.append(np.full(m.sum(), c))
                nbs.append(nb[m])
                kks.append(np.full(m.sum(), kk))
                rows.append(row[m] - col[m])
                cols.append(col[m])
    cat = np.concatenate
    return cat(colors), cat(nbs), cat(kks), cat(rows), cat(cols)


def _banded_hessian(obj: _Polyline, P, free):
    """Banded Hessian of the discrete action over the interior nodes.

    Columns are recovered from central differences of the gradient with
    3d colors (node i only couples to i-1, i, i+1).
    """
    n_in = P.shape[0] - 2
    d = P.shape[1]
    bw = 2 * d - 1  # lower bandwidth in flattened ordering
    ab = np.zeros((bw + 1, n_in * d))
    dG = np.empty((3 * d, n_in, d))
    steps = np.empty((3 * d, n_in))
    for c in range(3 * d):
        node_mod, k = divmod(c, d)
        sel = 1 + np.arange(node_mod, n_in, 3)
        step = 1e-5 * (1.0 + np.abs(P[:, k]))
        Pp = P.copy()
        Pm = P.copy()
        Pp[sel, k] += step[sel]
        Pm[sel, k] -= step[sel]
        dG[c] = (obj.grad(Pp) - obj.grad(Pm))[1:-1]
        steps[c] = step[1:-1]
    color, nb, kk, row, col = _band_pattern(n_in, d)
    node = col // d
    ab[row, col] = dG[color, nb, kk] / (2.0 * steps[color, node])
    return ab


def _solve_banded_pd(ab, g):
    shift = 0.0
    diag_scale = max(1e-12, float(np.max(np.abs(ab[0]))))
    for _ in range(40):
        A = ab.copy()
        A[0] += shift
        try:
            cb = sla.cholesky_banded(A, lower=True)
            return sla.cho_solve_banded((cb, True), g)
        except (np.linalg.LinAlgError, ValueError):
            shift = max(2.0 * shift, 1e-8 * diag_scale)
    raise SolverError("could not regularize the polyline Hessian")


def minimize_polyline(flow: FlowManifold, P0, s, maxit=POLY_MAXIT, gtol=1e-10):
    """Minimize the discrete action over interior nodes (Newton + Armijo).

    Returns (P, value, iterations, converged).
    """
    obj = _Polyline(flow, s)
    P = np.array(P0, dtype=float)
    f = obj.value(P)
    scale = 1.0 + abs(f)
    it = 0
    for it in range(1, maxit + 1):
        G = obj.grad(P)[1:-1].reshape(-1)
        if np.max(np.abs(G)) <= gtol * scale:
            return P, f, it, True
        ab = _banded_hessian(obj, P, None)
        step = -_solve_banded_pd(ab, G)
        slope = float(G @ step)
        if slope >= 0:
            step, slope = -G, -float(G @ G)
        alpha = 1.0
        while True:
            Pn = P.copy()
            Pn[1:-1] += alpha * step.reshape(-1, P.shape[1])
            fn = obj.value(Pn) if np.all(np.isfinite(Pn)) else np.inf
            if fn <= f + 1e-4 * alpha * slope:
                break
            alpha *= 0.5
            if alpha < 1e-12:
                return P, f, it, False
        if abs(f - fn) <= 1e-15 * scale and alpha * np.max(np.abs(step)) < 1e-14:
            P, f = Pn, fn
            return P, f, it, True
        P, f = Pn, fn
    G = obj.grad(P)[1:-1]
    return P, f, it, bool(np.max(np.abs(G)) <= 1e-6 * scale)


def polyline_action(flow: FlowManifold, P, s) -> float:
    """Discrete action including the (curve-independent) curvature term."""
    sm = 0.5 * (s[1:] + s[:-1])
    pot = 0.0
    if flow.curved_dim:
        pot = float(np.sum(2.0 * sm * sm * flow.scalar_curvature(sm * sm))) * (s[1] - s[0])
    return _Polyline(flow, s).value(P) + pot


# --------------------------------------------------------------------------
# phase (b) and the full solver


_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def inv_scale_integral(flow, s1, s2) -> float:
    """int_{s1}^{s2} ds / a(s^2) by 24-point Gauss-Legendre (integrand is smooth)."""
    half = 0.5 * (s2 - s1)
    s = s1 + half * (_GL_X + 1.0)
    return float(half * (_GL_W @ (1.0 / flow.scale_at(s * s))))


def _guess_p0(flow, x: Point, st: _Start, tau1, tau2):
    """Initial s-velocity of the frozen-geodesic reparametrization (chart of x)."""
    dc = flow.curved_dim
    s1, s2 = math.sqrt(tau1), math.sqrt(tau2)
    p = np.zeros(flow.dim)
    p[dc:] = (st.target[dc:] - x.coords[dc:]) / (s2 - s1)
    if dc:
        J = inv_scale_integral(flow, s1, s2)
        p[:dc] = st.v_curved / (float(flow.scale(tau1)) * J) * (
            1.0 if flow.kappa > 0 else 1.0)
    return p


def _newton(flow, x: Point, st: _Start, tau1, tau2, p0, N, maxit=60):
    tgt = np.asarray(st.target, dtype=float)
    tol = 1e-11 * (1.0 + float(np.max(np.abs(tgt))))
    try:
        z, rn, it, ok = _kernels.newton_shoot(
            flow.kernel_params, x.coords.copy(), x.chart, tgt.copy(),
            int(st.target_chart), math.sqrt(tau1), math.sqrt(tau2), int(N),
            np.asarray(p0, dtype=float).copy(), maxit, tol)
    except Exception:  # singular Jacobian inside the compiled loop
        return p0, np.inf, False
    return z, rn, bool(ok) or rn <= 1e-9 * (1.0 + float(np.max(np.abs(tgt))))


def _vec_to_chart(flow, x: Point, chart, v):
    if chart == x.chart:
        return np.asarray(v, dtype=float)
    xc = flow.to_chart(x, chart)
    _, V = flow.to_chart(xc, x.chart, v)
    return V


def _run_start(flow, x, st, tau1, tau2, N, method, poly_n):
    info = {"label": st.label}
    if method == "full":
        s_poly = np.linspace(math.sqrt(tau1), math.sqrt(tau2), poly_n + 1)
        P0, chart = _initial_polyline(flow, x, st, s_poly)
        p0 = None
        if flow.curved_dim and not np.max(np.abs(P0[:, : flow.curved_dim])) <= 20.0:
            # path crosses a chart pole: phase (a) is skipped for this start
            info["phase_a"] = "skipped"
        else:
            try:
                P, f, it, ok = minimize_polyline(flow, P0, s_poly)
            except SolverError as exc:
                info["phase_a"] = f"failed: {exc}"
            else:
                info.update(phase_a_iterations=it, phase_a_converged=ok,
                            phase_a_action=polyline_action(flow, P, s_poly))
                h = s_poly[1] - s_poly[0]
                v0 = (-3.0 * P[0] + 4.0 * P[1] - P[2]) / (2.0 * h)
                p0 = _vec_to_chart(flow, x, chart, v0) if chart != x.chart else v0
        if p0 is None:
            p0 = _guess_p0(flow, x, st, tau1, tau2)
    else:
        p0 = _guess_p0(flow, x, st, tau1, tau2)
    z, rn, ok = _newton(flow, x, st, tau1, tau2, p0, N)
    if not ok and method != "full":
        # fall back on the exact-law polyline guess with a finer integration
        z, rn, ok = _newton(flow, x, st, tau1, tau2, _guess_p0(
            flow, x, st, tau1, tau2), 2 * N)
    info["newton_residual"] = float(rn)
    return z, ok, info


def _result_from_p0(flow, x, y, tau1, tau2, p0, N):
    xs, ps, charts, _, A = _integrate(flow, x, p0, None, tau1, tau2, N)
    s = np.linspace(math.sqrt(tau1), math.sqrt(tau2), N + 1)
    curve = LCurve(flow, s, xs, charts, float(tau1), float(tau2), ps)
    resid = flow.rho(flow.tau_max, curve.end, y)
    return curve, float(A), resid


def solve_min_lgeodesic(flow: FlowManifold, x, tau1, y, tau2, N=DEFAULT_N,
                        method="full", poly_n=POLY_N, audit=True) -> LGeodesicResult:
    """Minimal L-geodesic from (x, tau1) to (y, tau2).

    method="full": polyline minimization then Newton shooting for every start.
    method="shoot": Newton shooting from the frozen-geodesic reparametrization
    only (no polyline phase); used inside random walks.
    """
    _check_times(flow, tau1, tau2)
    x, y = as_point(x), flow.canonical(as_point(y))
    flow.check_chart(x)
    flow.check_chart(y)
    starts = _starts(flow, x, y, tau2, fast=(method == "shoot"))
    cands = []
    for st in starts:
        z, ok, info = _run_start(flow, x, st, tau1, tau2, N, method, poly_n)
        if not ok:
            continue
        try:
            curve, A, resid = _result_from_p0(flow, x, y, tau1, tau2, z, N)
        except SolverError:
            continue
        if resid > RESIDUAL_TOL:
            continue
        cands.append((A, tuple(np.round(0.5 * z, 12)), 0.5 * z, curve, resid))
    if not cands:
        raise SolverError("no start converged for the L-geodesic problem")
    best_A = min(c[0] for c in cands)
    tie = NEAR_TIE * max(1.0, abs(best_A))
    near = [c for c in cands if c[0] <= best_A + tie]
    near.sort(key=lambda c: c[1])
    # count distinct minimizers among the near-ties
    g1 = flow.metric(x, tau1)
    distinct = []
    for c in near:
        if all(math.sqrt(max(0.0, float((c[2] - o[2]) @ g1 @ (c[2] - o[2]))))
               > 1e-6 * (1.0 + math.sqrt(float(o[2] @ g1 @ o[2])))
               for o in distinct):
            distinct.append(c)
    A, _, Z, curve, resid = near[0]
    viol = check_bounds(flow, x, tau1, y, tau2, A, curve) if audit else ()
    if audit:
        bound_audit.record(viol)
    return LGeodesicResult(
        curve=curve, action=A,
        initial_Z=TangentVec(SpaceTimePoint(x, float(tau1)), Z),
        converged=True, multiplicity_hint=len(distinct), residual=resid,
        candidate_actions=tuple(sorted(c[0] for c in cands)),
        bound_violations=tuple(viol))


def polyline_only_action(flow: FlowManifold, x, tau1, y, tau2, n=1024) -> float:
    """Least discrete action over the start set, without any shooting."""
    _check_times(flow, tau1, tau2)
    x, y = as_point(x), flow.canonical(as_point(y))
    s = np.linspace(math.sqrt(tau1), math.sqrt(tau2), n + 1)
    best = np.inf
    for st in _starts(flow, x, y, tau2):
        P0, _ = _initial_polyline(flow, x, st, s)
        if flow.curved_dim and not np.max(np.abs(P0[:, : flow.curved_dim])) <= 20.0:
            continue
        try:
            P, f, it, ok = minimize_polyline(flow, P0, s)
        except SolverError:
            continue
        best = min(best, polyline_action(flow, P, s))
    return float(best)


def l_distance(flow: FlowManifold, x, tau1, y, tau2, **kw) -> float:
    return solve_min_lgeodesic(flow, x, tau1, y, tau2, **kw).action


def flat_l_distance(flow: FlowManifold, x, tau1, y, tau2) -> float:
    """Closed form on the flat torus: min over images of |y - x|^2 / (2 ds)."""
    if flow.curved_dim:
        raise GeometryError("closed form only for the flat torus")
    _check_times(flow, tau1, tau2)
    r = flow.rho(tau1, x, y)
    return r * r / (2.0 * (math.sqrt(tau2) - math.sqrt(tau1)))


def theta_value(tb1, tb2, t, L, d) -> float:
    ds = math.sqrt(tb2 * t) - math.sqrt(tb1 * t)
    return 2.0 * ds * L - 2.0 * d * ds * ds


def theta(flow: FlowManifold, tb1, tb2, t, x, y, **kw) -> float:
    """Normalized L-distance between (x, tb1 t) and (y, tb2 t)."""
    if not tb1 < tb2:
        raise GeometryError("need tb1 < tb2")
    L = l_distance(flow, x, tb1 * t, y, tb2 * t, **kw)
    return theta_value(tb1, tb2, t, L, flow.dim)


def end_vectors(flow: FlowManifold, curve: LCurve, y: Point, V):
    """Vectors at the curve's end node expressed in the chart of y."""
    _, W = flow.to_chart(curve.point(-1), y.chart, V)
    return W


def transport_frame(flow: FlowManifold, x, tau1, y, tau2, frame,
                    result: LGeodesicResult | None = None, N=DEFAULT_N):
    """m_{xy}^{tau1 tau2} applied to an orthonormal frame.

    Returns (vectors at y in the chart of canonical(y), drift before the final
    Gram-Schmidt pass, result).
    """
    if result is None:
        result = solve_min_lgeodesic(flow, x, tau1, y, tau2, N=N)
    V = frame.vectors if hasattr(frame, "vectors") else np.asarray(frame, float)
    tm = transport_map(result.curve, V)
    yc = flow.canonical(as_point(y))
    W = end_vectors(flow, result.curve, yc, tm.target)
    g2 = flow.metric(yc, tau2)
    drift = float(np.max(np.abs(W @ g2 @ W.T - np.eye(W.shape[0]))))
    W = gram_schmidt(flow, tau2, yc, W)
    return W, drift, result


# --------------------------------------------------------------------------
# variation formulas


def dL_boundary(flow: FlowManifold, result: LGeodesicResult) -> tuple:
    """(dL/dtau1, dL/dtau2) from the endpoint velocities."""
    c = result.curve
    if c.tau1 <= 0:
        raise GeometryError("tau1 = 0 is not supported")
    gd = c.gamma_dot()
    v1 = float(flow.norm2(c.tau1, c.points[0], gd[0]))
    v2 = float(flow.norm2(c.tau2, c.points[-1], gd[-1]))
    R1 = float(flow.scalar_curvature(c.tau1))
    R2 = float(flow.scalar_curvature(c.tau2))
    return (-math.sqrt(c.tau1) * (R1 - v1), math.sqrt(c.tau2) * (R2 - v2))


@dataclass(frozen=True)
class DLambdaReport:
    boundary: float
    integral: float

    @property
    def value(self) -> float:
        return self.integral


def _node_quantities(flow, curve: LCurve):
    tau = curve.taus
    gd = curve.gamma_dot()
    v2 = flow.norm2(tau, curve.points, gd)
    ric = flow.ricci_form(tau, curve.points, gd, gd)
    R = flow.scalar_curvature(tau) * np.ones_like(tau)
    rn = flow.ricci_norm2(tau) * np.ones_like(tau)
    return tau, gd, v2, ric, R, rn


def _tau_integral(curve: LCurve, f_tau):
    """int f dtau over the curve, via s: dtau = 2 s ds."""
    s = curve.s_grid
    return _quad_s(f_tau * 2.0 * s, s)


def dLambda_dt(flow: FlowManifold, tb1, tb2, t, result: LGeodesicResult) -> DLambdaReport:
    c = result.curve
    tau, gd, v2, ric, R, rn = _node_quantities(flow, c)
    lap = 0.0  # Delta R vanishes on the model flows
    bnd = (tau[-1] ** 1.5 * (R[-1] - v2[-1]) - tau[0] ** 1.5 * (R[0] - v2[0])) / t
    f = tau**1.5 * (1.5 * R / tau - lap - 2.0 * rn - v2 / (2.0 * tau) + 2.0 * ric)
    return DLambdaReport(boundary=float(bnd), integral=_tau_integral(c, f) / t)


def hessian_rhs(flow: FlowManifold, t, result: LGeodesicResult) -> float:
    c = result.curve
    tau, gd, v2, ric, R, rn = _node_quantities(flow, c)
    d = flow.dim
    f = tau**1.5 * (2.0 * rn + 0.0 - 2.0 * R / tau - 2.0 * ric)
    return d * (math.sqrt(tau[-1]) - math.sqrt(tau[0])) / t + _tau_integral(c, f) / t


def combined_rhs(flow: FlowManifold, tb1, tb2, t, Lam) -> float:
    return flow.dim * (math.sqrt(tb2) - math.sqrt(tb1)) / math.sqrt(t) - Lam / (2.0 * t)


def parallel_frame_history(flow: FlowManifold, result: LGeodesicResult, frame=None):
    """Space-time parallel frame along the minimizer, at every node.

    Returns (frame at start (d, d), history (N+1, d, d) in node charts).
    """
    c = result.curve
    if frame is None:
        frame = flow.section_frame(c.tau1, c.point(0))
    tm = transport_map(c, frame)
    return np.asarray(frame), tm.history


def h_integral_bound(flow: FlowManifold, t, result: LGeodesicResult, frame=None):
    """Second-variation bound summed over the frame, from the H-form.

    Z_i = sqrt(tau/t) Z_i^* with Z_i^* the space-time parallel frame; the
    bound is  sum_i [ |Z_i|^2/sqrt(tau) - 2 sqrt(tau) Ric(Z_i, Z_i) ]_{tau1}^{tau2}
    - int sqrt(tau) sum_i H(gamma_dot, Z_i) dtau.
    Returns (value, boundary part, H part).
    """
    c = result.curve
    _, hist = parallel_frame_history(flow, result, frame)
    tau = c.taus
    gd = c.gamma_dot()
    Zs = hist * np.sqrt(tau / t)[:, None, None]
    H = h_form_nodes(flow, tau, c.points, gd, Zs)  # (N+1, d)

    def ends(k):
        sq = math.sqrt(tau[k])
        z2 = flow.norm2(tau[k], c.points[k], Zs[k]).sum()
        ric = flow.ricci_form(tau[k], c.points[k], Zs[k], Zs[k]).sum()
        return z2 / sq - 2.0 * sq * ric

    bnd = float(ends(-1) - ends(0))
    hint = -_tau_integral(c, np.sqrt(tau) * H.sum(axis=1))
    return bnd + hint, bnd, hint


def _lam(flow, x, tau1, y, tau2, N, method="shoot"):
    return solve_min_lgeodesic(flow, x, tau1, y, tau2, N=N, method=method,
                               audit=False).action


@dataclass(frozen=True)
class HessianReport:
    lhs: float
    rhs: float
    rhs_h_form: float
    dlambda: DLambdaReport
    Lambda: float
    combined_lhs: float
    combined_rhs: float
    multiplicity_hint: int
    tol: float

    @property
    def hessian_ok(self) -> bool:
        return self.lhs <= self.rhs + self.tol

    @property
    def combined_ok(self) -> bool:
        return self.combined_lhs <= self.combined_rhs + self.tol

    @property
    def ok(self) -> bool:
        return self.hessian_ok and self.combined_ok


def hessian_bound_check(flow: FlowManifold, tb1, tb2, t, x, y, N=DEFAULT_N,
                        steps=(1e-2, 5e-3), rtol=1e-3) -> HessianReport:
    """Compare the second-difference Hessian of Lambda with its upper bound.

    Variation in direction xi_i = (sqrt(tb1) e_i, sqrt(tb2) e_i^*) where e_i is
    the section frame at x and e_i^* its space-time transport to y.
    """
    tau1, tau2 = tb1 * t, tb2 * t
    x, y = as_point(x), flow.canonical(as_point(y))
    res = solve_min_lgeodesic(flow, x, tau1, y, tau2, N=N)
    Lam = res.action
    frame = flow.section_frame(tau1, x)
    Wy, _, _ = transport_frame(flow, x, tau1, y, tau2, frame, res, N)
    yc = y
    total = 0.0
    for i in range(flow.dim):
        ex = math.sqrt(tb1) * frame[i]
        ey = math.sqrt(tb2) * Wy[i]

        def second_diff(h):
            xp = flow.exp(tau1, x, h * ex)
            yp = flow.exp(tau2, yc, h * ey)
            xm = flow.exp(tau1, x, -h * ex)
            ym = flow.exp(tau2, yc, -h * ey)
            return (_lam(flow, xp, tau1, yp, tau2, N)
                    + _lam(flow, xm, tau1, ym, tau2, N) - 2.0 * Lam) / h**2

        D = [second_diff(h) for h in steps]
        total += (4.0 * D[1] - D[0]) / 3.0 if len(D) == 2 else D[0]
    rhs = hessian_rhs(flow, t, res)
    rhs_h, _, _ = h_integral_bound(flow, t, res, frame)
    dl = dLambda_dt(flow, tb1, tb2, t, res)
    crhs = combined_rhs(flow, tb1, tb2, t, Lam)
    tol = rtol * (1.0 + abs(rhs))
    return HessianReport(lhs=total, rhs=rhs, rhs_h_form=rhs_h, dlambda=dl,
                         Lambda=Lam, combined_lhs=total + dl.integral,
                         combined_rhs=crhs, multiplicity_hint=res.multiplicity_hint,
                         tol=tol)


@dataclass(frozen=True)
class FirstVariationReport:
    finite_difference: float
    formula: float
    formula_half: float


def first_variation_check(flow: FlowManifold, tb1, tb2, t, x, y, u_vec, h=1e-4,
                          N=DEFAULT_N) -> FirstVariationReport:
    """Directional derivative of Lambda along (sqrt(2 tb1) u, sqrt(2 tb2) m(u)).

    `u_vec` is g(tb1 t)-orthonormal-frame coefficients at x.  The formula uses
    dL = 2 sqrt(tau) <gamma_dot, delta gamma> at the endpoints; the variant
    without the factor 2 is reported alongside.
    """
    tau1, tau2 = tb1 * t, tb2 * t
    x, y = as_point(x), flow.canonical(as_point(y))
    res = solve_min_lgeodesic(flow, x, tau1, y, tau2, N=N)
    frame = flow.section_frame(tau1, x)
    Wy, _, _ = transport_frame(flow, x, tau1, y, tau2, frame, res, N)
    u = np.asarray(u_vec, dtype=float)
    e = u @ frame
    es = u @ Wy
    c = res.curve
    yc = y
    gd = c.gamma_dot()
    end_c, gd_end = y, end_vectors(flow, c, y, gd[-1])
    ip1 = float(flow.inner_batch(tau1, c.points[0], e, gd[0]))
    ip2 = float(flow.inner_batch(tau2, end_c.coords, es, gd_end))
    half = math.sqrt(2 * t) * (tb2 * ip2 - tb1 * ip1)
    dx = math.sqrt(2 * tb1) * e
    dy = math.sqrt(2 * tb2) * es

    def lam(hh):
        return _lam(flow, flow.exp(tau1, x, hh * dx), tau1,
                    flow.exp(tau2, yc, hh * dy), tau2, N)

    fd = (8 * (lam(h) - lam(-h)) - (lam(2 * h) - lam(-2 * h))) / (12 * h)
    return FirstVariationReport(fd, 2.0 * half, half)


# --------------------------------------------------------------------------
# a-priori bounds


def l_sandwich(flow: FlowManifold, x, tau1, y, tau2, denominator="difference",
               exponent="gap") -> tuple:
    """Lower/upper bounds for L(x, tau1; y, tau2) in terms of rho_{g(T)}.

    denominator: "difference" uses 2 (sqrt(tau2) - sqrt(tau1)); "mixed" uses
    2 sqrt(tau2) - sqrt(tau1).  exponent: "gap" uses 2 C0 (tau2 - tau1);
    "horizon" uses 2 C0 (T - tau1), which is valid for every time gap.
    """
    C0, d = flow.C0, flow.dim
    r = flow.rho(flow.tau_max, x, y)
    s1, s2 = math.sqrt(tau1), math.sqrt(tau2)
    if denominator not in ("difference", "mixed"):
        raise ValueError("denominator must be 'difference' or 'mixed'")
    den = 2.0 * (s2 - s1) if denominator == "difference" else 2.0 * s2 - s1
    span = (tau2 - tau1) if exponent == "gap" else (flow.tau_max - tau1)
    k = math.exp(2.0 * C0 * span)
    corr = (2.0 / 3.0) * d * C0 * (tau2**1.5 - tau1**1.5)
    return r * r / (k * den) - corr, k * r * r / den + corr


def velocity_bound(flow: FlowManifold, tau1, tau2, rho_T) -> tuple:
    """(c2, C2, bound) with max tau |gamma_dot|^2 <= c2 rho_T^2 + C2."""
    C0, d = flow.C0, flow.dim
    ds = math.sqrt(tau2) - math.sqrt(tau1)
    c1 = math.exp(2.0 * C0 * (tau2 - tau1))
    C1 = 0.0  # grad R vanishes, so the forcing term of the velocity ODE drops
    c2 = c1 * math.exp(2.0 * C0 * (tau2 - tau1)) / (4.0 * ds * ds)
    C2 = c1 * (4.0 / 3.0) * d * C0 * (tau2**1.5 - tau1**1.5) / (2.0 * ds) + C1
    return c2, C2, c2 * rho_T**2 + C2


def max_tau_speed2(curve: LCurve) -> float:
    tau = curve.taus
    gd = curve.gamma_dot()
    return float(np.max(tau * curve.flow.norm2(tau, curve.points, gd)))


def check_bounds(flow, x, tau1, y, tau2, action, curve, slack=1e-9) -> list:
    out = []
    lo, hi = l_sandwich(flow, x, tau1, y, tau2)
    tol = slack * (1.0 + abs(action))
    if action < lo - tol:
        out.append(("L-lower", float(action), float(lo)))
    if action > hi + tol:
        out.append(("L-upper", float(action), float(hi)))
    r = flow.rho(flow.tau_max, x, y)
    _, _, vb = velocity_bound(flow, tau1, tau2, r)
    v = max_tau_speed2(curve)
    if v > vb * (1.0 + 1e-6) + 1e-9:
        out.append(("velocity", v, float(vb)))
    return out

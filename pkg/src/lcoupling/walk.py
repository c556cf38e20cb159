"""Coupled geodesic random walks on model backwards Ricci flows.

One step from (X, Y) at grid time t_n:

    lam ~ uniform(unit ball),  lam1 = sqrt(d+2) Phi(X) lam,  lam2 = sqrt(d+2) m(Phi(X)) lam,
    X' = exp^{(tb1 t_n)}_X(eps sqrt(2 tb1) lam1),   Y' = exp^{(tb2 t_n)}_Y(eps sqrt(2 tb2) lam2),

where Phi is the Gram-Schmidt section of the coordinate basis and m the
space-time parallel transport along the minimal L-geodesic from
(X, tb1 t_n) to (Y, tb2 t_n).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from lcoupling import lgeo
from lcoupling.geometry import FlowManifold, GeometryError, Point, as_point

FLAG_RETRIED = 1
FLAG_MULTIPLE = 2
FLAG_FLOOR = 4
FLAG_ISOMETRY = 8


class WalkAborted(RuntimeError):
    def __init__(self, msg, path=None):
        super().__init__(msg)
        self.path = path


def replica_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """Counter-based substream for (seed, replica); independent of scheduling."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


def sample_uniform_ball(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform point of the unit ball: normalized Gaussian times U^(1/d)."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    g = rng.standard_normal(dim)
    u = rng.random()
    n = math.sqrt(float(g @ g))
    if n == 0.0:
        return np.zeros(dim)
    return g / n * u ** (1.0 / dim)


def sample_uniform_ball_batch(dim, size, rng) -> np.ndarray:
    g = rng.standard_normal((size, dim))
    u = rng.random(size)
    n = np.linalg.norm(g, axis=1)
    n[n == 0] = 1.0
    return g / n[:, None] * (u ** (1.0 / dim))[:, None]


@dataclass(frozen=True)
class WalkConfig:
    flow: FlowManifold
    tb1: float
    tb2: float
    s_start: float
    eps: float
    x0: tuple
    y0: tuple
    seed: int = 0
    max_steps: int = 0
    replica: int = 0
    solver: str = "shoot"  # "shoot", "full" or "closed" (flat torus only)
    N: int = lgeo.DEFAULT_N
    x0_chart: int = 0
    y0_chart: int = 0

    def __post_init__(self):
        f = self.flow
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.tb1 < self.tb2:
            raise ValueError("need 0 <= tb1 < tb2")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.s_start < 1.0 - 1e-12 or self.s_start > f.tau_max / self.tb2 + 1e-12:
            raise ValueError("s_start must lie in [1, T / tb2]")
        end = self.tb2 * (self.s_start + self.eps**2 * self.max_steps)
        if end > f.tau_max * (1.0 + 1e-9):
            raise ValueError("tb2 (s_start + eps^2 max_steps) exceeds T")
        if self.tb1 * self.s_start < f.tau_min - 1e-12:
            raise ValueError("tb1 s_start is below the flow's tau_min")
        if self.solver == "closed" and f.curved_dim:
            raise ValueError("closed-form solver only exists for the flat torus")

    def t_grid(self, n) -> float:
        return min(self.s_start + self.eps**2 * n, self.flow.tau_max / self.tb2)

    @property
    def x0_point(self) -> Point:
        return self.flow.canonical(Point(self.x0, self.x0_chart))

    @property
    def y0_point(self) -> Point:
        return self.flow.canonical(Point(self.y0, self.y0_chart))


@dataclass
class WalkPath:
    cfg: WalkConfig
    t: list = field(default_factory=list)
    X: list = field(default_factory=list)
    Xchart: list = field(default_factory=list)
    Y: list = field(default_factory=list)
    Ychart: list = field(default_factory=list)
    Lambda: list = field(default_factory=list)
    Theta: list = field(default_factory=list)
    zeta: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    iso_dev: list = field(default_factory=list)
    aborted: str = ""

    def __len__(self):
        return len(self.t)

    def arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in
                ("t", "X", "Y", "Lambda", "Theta", "zeta", "flags")}

    def to_csv(self) -> str:
        d = self.cfg.flow.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "t"] + [f"X{i}" for i in range(d)] + ["Xchart"]
                   + [f"Y{i}" for i in range(d)] + ["Ychart", "Lambda",
                                                   "Theta", "zeta",
                                                   "solver_flags"])
        for n in range(len(self.t)):
            w.writerow([n, _f(self.t[n])] + [_f(v) for v in self.X[n]]
                       + [self.Xchart[n]] + [_f(v) for v in self.Y[n]]
                       + [self.Ychart[n], _f(self.Lambda[n]),
                          _f(self.Theta[n]), _f(self.zeta[n]), self.flags[n]])
        return buf.getvalue()

    def to_json(self) -> str:
        obj = {"t": self.t, "X": [list(map(float, v)) for v in self.X],
               "Y": [list(map(float, v)) for v in self.Y],
               "Xchart": self.Xchart, "Ychart": self.Ychart,
               "Lambda": self.Lambda, "Theta": self.Theta,
               "zeta": [None if not np.isfinite(z) else z for z in self.zeta],
               "flags": self.flags, "aborted": self.aborted}
        return json.dumps(obj, sort_keys=True)


def _f(v) -> str:
    v = float(v)
    return "nan" if not np.isfinite(v) else repr(v)


def theta_floor(flow: FlowManifold, tb1, tb2, t) -> float:
    d, C0 = flow.dim, flow.C0
    ds = math.sqrt(tb2 * t) - math.sqrt(tb1 * t)
    return (-2.0 * d * ds * ds
            - (2.0 / 3.0) * d * C0 * 2.0 * ds * ((tb2 * t) ** 1.5 - (tb1 * t) ** 1.5))


@dataclass
class CoupledGeodesic:
    """What a step needs from the minimal L-geodesic between the two particles."""

    action: float
    gdot1: np.ndarray  # gamma_dot at (X, tau1), chart of X
    gdot2: np.ndarray  # gamma_dot at (Y, tau2), chart of Y
    frame2: np.ndarray  # transported section frame at Y, chart of Y
    multiplicity: int = 1
    retried: bool = False
    result: object = None


def coupled_geodesic(flow: FlowManifold, X: Point, tau1, Y: Point, tau2,
                     frame1, solver="shoot", N=lgeo.DEFAULT_N) -> CoupledGeodesic:
    if solver == "closed":
        L = lgeo.flat_l_distance(flow, X, tau1, Y, tau2)
        v = flow.log(tau1, X, Y)
        ds = math.sqrt(tau2) - math.sqrt(tau1)
        return CoupledGeodesic(L, v / (ds * 2.0 * math.sqrt(tau1)),
                               v / (ds * 2.0 * math.sqrt(tau2)),
                               np.array(frame1, dtype=float))
    retried = False
    try:
        res = lgeo.solve_min_lgeodesic(flow, X, tau1, Y, tau2, N=N, method=solver)
    except lgeo.SolverError:
        retried = True
        res = lgeo.solve_min_lgeodesic(flow, X, tau1, Y, tau2, N=N, method="full")
    W, _, _ = lgeo.transport_frame(flow, X, tau1, Y, tau2, frame1, res, N)
    c = res.curve
    gd = c.gamma_dot()
    g2 = lgeo.end_vectors(flow, c, Y, gd[-1])
    return CoupledGeodesic(res.action, gd[0], g2, W, res.multiplicity_hint,
                           retried, res)


def coupled_step(flow, X: Point, Y: Point, t_n, lam, cfg: WalkConfig, geo=None):
    """One coupled step.  Returns (X', Y', zeta, geodesic data, isometry deviation)."""
    d = flow.dim
    tau1, tau2 = cfg.tb1 * t_n, cfg.tb2 * t_n
    frame1 = flow.section_frame(tau1, X)
    if geo is None:
        geo = coupled_geodesic(flow, X, tau1, Y, tau2, frame1, cfg.solver, cfg.N)
    c = math.sqrt(d + 2.0)
    lam1 = c * (lam @ frame1)
    lam2 = c * (lam @ geo.frame2)
    zeta = 2.0 * math.sqrt(2.0 * t_n) * (
        cfg.tb2 * float(flow.inner_batch(tau2, Y.coords, lam2, geo.gdot2))
        - cfg.tb1 * float(flow.inner_batch(tau1, X.coords, lam1, geo.gdot1)))
    incx = cfg.eps * math.sqrt(2.0 * cfg.tb1) * lam1
    incy = cfg.eps * math.sqrt(2.0 * cfg.tb2) * lam2
    nx = math.sqrt(float(flow.norm2(tau1, X.coords, incx)))
    ny = math.sqrt(float(flow.norm2(tau2, Y.coords, incy)))
    iso = abs(ny - math.sqrt(cfg.tb2 / cfg.tb1) * nx) if cfg.tb1 > 0 else 0.0
    Xn = flow.exp(tau1, X, incx) if cfg.tb1 > 0 else X
    Yn = flow.exp(tau2, Y, incy)
    return Xn, Yn, zeta, geo, iso


def run_coupled_walk(cfg: WalkConfig, checkpoints=None, raise_on_abort=False) -> WalkPath:
    """Run the coupled walk for cfg.max_steps steps (deterministic in seed, replica).

    `checkpoints` (step indices) limits the recorded rows to those steps.
    """
    flow = cfg.flow
    d = flow.dim
    rng = replica_rng(cfg.seed, cfg.replica)
    X, Y = cfg.x0_point, cfg.y0_point
    path = WalkPath(cfg)
    keep = None if checkpoints is None else set(int(k) for k in checkpoints)
    zeta_prev = float("nan")
    flags_prev = 0
    for n in range(cfg.max_steps + 1):
        t_n = cfg.t_grid(n)
        tau1, tau2 = cfg.tb1 * t_n, cfg.tb2 * t_n
        frame1 = flow.section_frame(tau1, X)
        try:
            geo = coupled_geodesic(flow, X, tau1, Y, tau2, frame1, cfg.solver, cfg.N)
        except (lgeo.SolverError, GeometryError) as exc:
            path.aborted = f"step {n}: {exc}"
            if raise_on_abort:
                raise WalkAborted(path.aborted, path) from exc
            return path
        Lam = geo.action
        Th = lgeo.theta_value(cfg.tb1, cfg.tb2, t_n, Lam, d)
        flags = flags_prev
        if geo.retried:
            flags |= FLAG_RETRIED
        if geo.multiplicity > 1:
            flags |= FLAG_MULTIPLE
        if Th < theta_floor(flow, cfg.tb1, cfg.tb2, t_n) - 1e-9 * (1 + abs(Th)):
            flags |= FLAG_FLOOR
        if keep is None or n in keep:
            path.t.append(t_n)
            path.X.append(X.coords.copy())
            path.Xchart.append(X.chart)
            path.Y.append(Y.coords.copy())
            path.Ychart.append(Y.chart)
            path.Lambda.append(Lam)
            path.Theta.append(Th)
            path.zeta.append(zeta_prev)
            path.flags.append(flags)
        if n == cfg.max_steps:
            break
        lam = sample_uniform_ball(d, rng)
        X, Y, zeta_prev, _, iso = coupled_step(flow, X, Y, t_n, lam, cfg, geo)
        path.iso_dev.append(iso)
        flags_prev = FLAG_ISOMETRY if iso > 1e-8 else 0
    return path


@dataclass
class SinglePath:
    t: np.ndarray
    X: np.ndarray
    charts: np.ndarray


def run_single_walk(flow: FlowManifold, tb, s_start, eps, x0, seed, max_steps,
                    replica=0, checkpoints=None) -> SinglePath:
    """Marginal walk with time scale tb: X' = exp^{(tb t_n)}(eps sqrt(2 tb) sqrt(d+2) Phi lam)."""
    d = flow.dim
    rng = replica_rng(seed, replica)
    X = flow.canonical(as_point(x0))
    keep = None if checkpoints is None else set(int(k) for k in checkpoints)
    ts, xs, cs = [], [], []
    c = math.sqrt(d + 2.0)
    for n in range(max_steps + 1):
        t_n = min(s_start + eps * eps * n, flow.tau_max / tb)
        if keep is None or n in keep:
            ts.append(t_n)
            xs.append(X.coords.copy())
            cs.append(X.chart)
        if n == max_steps:
            break
        lam = sample_uniform_ball(d, rng)
        tau = tb * t_n
        frame = flow.section_frame(tau, X)
        X = flow.exp(tau, X, eps * math.sqrt(2.0 * tb) * c * (lam @ frame))
    return SinglePath(np.array(ts), np.array(xs), np.array(cs, dtype=int))


@dataclass(frozen=True)
class SigmaForm:
    """Sigma(lam) = A + (d+2) lam^T Q lam for a frozen state.

    `bare_shift` is the change when the |lam_hat|^2 sqrt(tau)/t boundary
    term is replaced by a bare sqrt(tau)/t.
    """

    A: float
    Q: np.ndarray
    Q_bare: np.ndarray
    bare_shift: float
    Lambda: float
    rhs: float

    def values(self, lams) -> np.ndarray:
        c = self.Q.shape[0] + 2.0
        return self.A + c * np.einsum("ki,ij,kj->k", lams, self.Q, lams)

    def values_bare(self, lams) -> np.ndarray:
        c = self.Q.shape[0] + 2.0
        return (self.A + self.bare_shift
                + c * np.einsum("ki,ij,kj->k", lams, self.Q_bare, lams))

    @property
    def expectation(self) -> float:
        # E[(d+2) lam lam^T] = Id for the uniform ball
        return self.A + float(np.trace(self.Q))


def sigma_form(flow: FlowManifold, tb1, tb2, t, res) -> SigmaForm:
    """Quadratic form of the second-order term Sigma_{n+1} at a frozen state."""
    c = res.curve
    tau = c.taus
    frame1 = flow.section_frame(c.tau1, c.point(0))
    _, hist = lgeo.parallel_frame_history(flow, res, frame1)
    Zs = hist * np.sqrt(tau / t)[:, None, None]
    gd = c.gamma_dot()
    v2 = flow.norm2(tau, c.points, gd)
    R = flow.scalar_curvature(tau) * np.ones_like(tau)
    A = (tau[-1] ** 1.5 * (R[-1] - v2[-1]) - tau[0] ** 1.5 * (R[0] - v2[0])) / t

    def ends(k, with_norm):
        Zk = Zs[k]
        G = flow.inner_batch(tau[k], c.points[k], Zk[:, None, :], Zk[None, :, :])
        ric = flow.ricci_form(tau[k], c.points[k], Zk[:, None, :], Zk[None, :, :])
        sq = math.sqrt(tau[k])
        return (G / sq if with_norm else 0.0) - 2.0 * sq * ric

    from lcoupling.geometry import h_form_bilinear_nodes

    Hb = h_form_bilinear_nodes(flow, tau, c.points, gd, Zs)
    hint = np.array([[lgeo._tau_integral(c, np.sqrt(tau) * Hb[:, i, j])
                      for j in range(Hb.shape[2])] for i in range(Hb.shape[1])])
    Q = ends(-1, True) - ends(0, True) - hint
    Qp = ends(-1, False) - ends(0, False) - hint
    shift = (math.sqrt(tau[-1]) - math.sqrt(tau[0])) / t
    Q = 0.5 * (Q + Q.T)
    Qp = 0.5 * (Qp + Qp.T)
    rhs = lgeo.combined_rhs(flow, tb1, tb2, t, res.action)
    return SigmaForm(float(A), Q, Qp, shift, res.action, rhs)

"""Monte Carlo experiments and invariant batteries.

Every experiment is a pure function of its spec: replicas draw from
(seed, replica) substreams, results are collected in replica order and
summed with math.fsum, so reports do not depend on the worker count.
"""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from lcoupling import lgeo, walk
from lcoupling.assignment import optimal_assignment
from lcoupling.geometry import FlowManifold, Point


class ExperimentKind(str, enum.Enum):
    SUPERMARTINGALE = "SupermartingaleTheta"
    SIGMA = "SigmaInequality"
    TRANSPORT = "TransportCost"
    IDENTITY = "IdentitySuite"


class SpecError(ValueError):
    """Inconsistent experiment specification (maps to CLI exit code 1)."""


@dataclass(frozen=True)
class ExperimentSpec:
    kind: ExperimentKind
    flow: FlowManifold
    tb1: float = 1.0
    tb2: float = 4.0
    s_start: float = 1.0
    checkpoints: tuple = ()
    replicas: int = 100
    eps: float = 0.05
    seed: int = 0
    x0: tuple = ()
    y0: tuple = ()
    solver: str = "shoot"
    N: int = lgeo.DEFAULT_N
    band: float = 2.0  # SE multiplier of the acceptance band
    states: int = 50  # SigmaInequality: frozen states M
    draws: int = 10_000  # SigmaInequality: lambda draws K per state
    state_steps: int = 40  # SigmaInequality: max walk length to reach a state
    min_fraction: float = 0.95
    points: int = 256  # TransportCost: support size n
    batches: int = 20  # TransportCost: B
    trials: int = 100  # IdentitySuite
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if self.replicas < 0 or self.trials < 0:
            raise SpecError("counts must be non-negative")
        if not 0 <= self.tb1 < self.tb2:
            raise SpecError("need 0 <= tb1 < tb2")
        if self.eps <= 0:
            raise SpecError("eps must be positive")
        for t in self.checkpoints:
            n = (t - self.s_start) / self.eps**2
            if n < -1e-9 or abs(n - round(n)) > 1e-6:
                raise SpecError(
                    f"checkpoint t={t} is not on the walk grid s + eps^2 n "
                    f"(s={self.s_start}, eps={self.eps})")
        if list(self.checkpoints) != sorted(self.checkpoints):
            raise SpecError("checkpoints must be increasing")
        if self.checkpoints and self.tb2 * self.checkpoints[-1] > self.flow.tau_max * (1 + 1e-12):
            raise SpecError("last checkpoint exceeds T / tb2")

    @property
    def steps(self) -> list:
        return [int(round((t - self.s_start) / self.eps**2)) for t in self.checkpoints]

    def start_points(self):
        d = self.flow.dim
        x0 = tuple(self.x0) if self.x0 else tuple([0.0] * d)
        y0 = tuple(self.y0) if self.y0 else x0
        if len(x0) != d or len(y0) != d:
            raise SpecError("start points must have flow.dim coordinates")
        return x0, y0


@dataclass
class ExperimentReport:
    experiment: str
    checkpoints: list = field(default_factory=list)
    passed: bool = True
    criteria: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"experiment": self.experiment,
                "checkpoints": _clean(self.checkpoints),
                "pass": bool(self.passed),
                "criteria": _clean(self.criteria),
                "diagnostics": _clean(self.diagnostics)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        keys = sorted({k for c in self.checkpoints for k in c})
        lines = [",".join(keys)]
        for c in self.checkpoints:
            lines.append(",".join(_csv_cell(c.get(k)) for k in keys))
        return "\n".join(lines) + "\n"


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def _clean(obj):
    """JSON-safe copy: non-finite floats become None, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# --------------------------------------------------------------------------
# statistics


def mean_se(values) -> tuple:
    """Mean and standard error with compensated summation (order fixed by caller)."""
    v = [float(x) for x in values]
    n = len(v)
    if n == 0:
        return float("nan"), float("inf")
    m = math.fsum(v) / n
    if n == 1:
        return m, float("inf")
    var = math.fsum((x - m) ** 2 for x in v) / (n - 1)
    return m, math.sqrt(var / n)


def paired_monotone(samples: np.ndarray, band: float) -> list:
    """Paired differences of consecutive columns; ok iff mean <= band * SE."""
    out = []
    for k in range(samples.shape[1] - 1):
        m, se = mean_se(samples[:, k + 1] - samples[:, k])
        ok = (not math.isfinite(se)) or m <= band * se
        out.append({"from": k, "to": k + 1, "mean_diff": m, "se_diff": se,
                    "ok": bool(ok), "asserted": bool(math.isfinite(se))})
    return out


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    chunk = max(1, len(items) // (8 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


# --------------------------------------------------------------------------
# supermartingale


class _ThetaReplica:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec

    def __call__(self, r):
        sp = self.spec
        x0, y0 = sp.start_points()
        cfg = walk.WalkConfig(sp.flow, sp.tb1, sp.tb2, sp.s_start, sp.eps, x0, y0,
                              seed=sp.seed, max_steps=max(sp.steps), replica=r,
                              solver=sp.solver, N=sp.N)
        path = walk.run_coupled_walk(cfg, checkpoints=sp.steps)
        flags = 0
        for f in path.flags:
            flags |= int(f)
        return (list(path.Theta), bool(path.aborted), flags,
                float(max(path.iso_dev, default=0.0)))


def experiment_supermartingale(spec: ExperimentSpec, workers=1) -> ExperimentReport:
    if spec.kind is not ExperimentKind.SUPERMARTINGALE:
        raise SpecError("wrong experiment kind")
    rep = ExperimentReport(spec.kind.value)
    if not spec.checkpoints or spec.replicas == 0:
        rep.diagnostics["note"] = "nothing to run"
        return rep
    results = _map(_ThetaReplica(spec), range(spec.replicas), workers)
    K = len(spec.checkpoints)
    ok_rows = [r[0] for r in results if not r[1] and len(r[0]) == K]
    failures = sum(1 for r in results if r[1])
    retried = sum(1 for r in results if r[2] & walk.FLAG_RETRIED)
    multi = sum(1 for r in results if r[2] & walk.FLAG_MULTIPLE)
    floor = sum(1 for r in results if r[2] & walk.FLAG_FLOOR)
    iso = max((r[3] for r in results), default=0.0)
    S = np.array(ok_rows, dtype=float).reshape(len(ok_rows), K)
    for k, t in enumerate(spec.checkpoints):
        m, se = mean_se(S[:, k])
        rep.checkpoints.append({"t": t, "mean": m, "se": se, "n": len(ok_rows)})
    pairs = paired_monotone(S, spec.band)
    rate = failures / spec.replicas
    rep.criteria.append({"name": "paired_monotone", "band_se": spec.band,
                         "pairs": pairs, "ok": all(p["ok"] for p in pairs)})
    rep.criteria.append({"name": "bvp_failure_rate", "value": rate,
                         "limit": spec.max_failure_rate,
                         "ok": rate <= spec.max_failure_rate})
    rep.criteria.append({"name": "theta_floor", "violations": floor, "ok": floor == 0})
    rep.criteria.append({"name": "increment_isometry", "max_dev": iso,
                         "ok": iso <= 1e-8})
    rep.passed = all(c["ok"] for c in rep.criteria)
    rep.diagnostics.update(replicas=spec.replicas, aborted=failures,
                           retried_rate=retried / spec.replicas,
                           multiplicity_rate=multi / spec.replicas,
                           solver=spec.solver, eps=spec.eps, N=spec.N)
    return rep


# --------------------------------------------------------------------------
# Sigma inequality


class _SigmaState:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec

    def __call__(self, m):
        sp = self.spec
        x0, y0 = sp.start_points()
        pick = walk.replica_rng(sp.seed, 1_000_000 + m)
        limit = int((sp.flow.tau_max / sp.tb2 - sp.s_start) / sp.eps**2 + 1e-9)
        n = int(pick.integers(0, min(sp.state_steps, limit) + 1))
        cfg = walk.WalkConfig(sp.flow, sp.tb1, sp.tb2, sp.s_start, sp.eps, x0, y0,
                              seed=sp.seed, max_steps=n, replica=m,
                              solver="closed" if sp.solver == "closed" else "shoot",
                              N=sp.N)
        path = walk.run_coupled_walk(cfg, checkpoints=[n])
        if path.aborted or not path.t:
            return None
        t = path.t[-1]
        X = Point(path.X[-1], path.Xchart[-1])
        Y = Point(path.Y[-1], path.Ychart[-1])
        try:
            res = lgeo.solve_min_lgeodesic(sp.flow, X, sp.tb1 * t, Y, sp.tb2 * t,
                                           N=sp.N)
        except lgeo.SolverError:
            return None
        sf = walk.sigma_form(sp.flow, sp.tb1, sp.tb2, t, res)
        lams = walk.sample_uniform_ball_batch(sp.flow.dim, sp.draws,
                                              walk.replica_rng(sp.seed, 2_000_000 + m))
        vals = sf.values(lams)
        mean, se = mean_se(vals)
        pm, _ = mean_se(sf.values_bare(lams))
        return {"t": t, "step": n, "mean": mean, "se": se, "n": sp.draws,
                "rhs": sf.rhs, "expectation": sf.expectation,
                "mean_bare_boundary_term": pm, "Lambda": sf.Lambda,
                "multiplicity_hint": res.multiplicity_hint,
                "ok": bool(mean <= sf.rhs + 3.0 * se)}


def experiment_sigma_inequality(spec: ExperimentSpec, workers=1) -> ExperimentReport:
    if spec.kind is not ExperimentKind.SIGMA:
        raise SpecError("wrong experiment kind")
    rep = ExperimentReport(spec.kind.value)
    rows = _map(_SigmaState(spec), range(spec.states), workers)
    skipped = sum(1 for r in rows if r is None)
    rows = [r for r in rows if r is not None]
    rep.checkpoints = rows
    frac = (sum(1 for r in rows if r["ok"]) / len(rows)) if rows else 1.0
    rep.criteria.append({"name": "sigma_bar_le_rhs", "band_se": 3.0,
                         "fraction": frac, "required": spec.min_fraction,
                         "ok": frac >= spec.min_fraction})
    rep.passed = all(c["ok"] for c in rep.criteria)
    rep.diagnostics.update(states=spec.states, skipped=skipped, draws=spec.draws,
                           max_abs_expectation_gap=max(
                               (abs(r["expectation"] - r["rhs"]) for r in rows),
                               default=0.0))
    return rep


# --------------------------------------------------------------------------
# transport cost


def l_cost_matrix(flow: FlowManifold, X, Xc, tau1, Y, Yc, tau2, solver="closed", N=128):
    """Matrix of L(x_i, tau1; y_j, tau2)."""
    if solver == "closed":
        if flow.curved_dim:
            raise SpecError("closed-form costs only exist on the flat torus")
        P = np.array(flow.periods)
        D = Y[None, :, :] - X[:, None, :]
        D = D - np.round(D / P) * P
        return np.sum(D * D, axis=-1) / (2.0 * (math.sqrt(tau2) - math.sqrt(tau1)))
    n = X.shape[0]
    C = np.empty((n, Y.shape[0]))
    for i in range(n):
        for j in range(Y.shape[0]):
            C[i, j] = lgeo.solve_min_lgeodesic(
                flow, Point(X[i], Xc[i]), tau1, Point(Y[j], Yc[j]), tau2, N=N,
                method="shoot").action
    return C


class _TransportBatch:
    def __init__(self, spec: ExperimentSpec):
        self.spec = spec

    def __call__(self, b):
        sp = self.spec
        x0, y0 = sp.start_points()
        steps = sp.steps
        n = sp.points
        xs, ys = [], []
        for i in range(n):
            base = 10_000_000 * (b + 1)
            xs.append(walk.run_single_walk(sp.flow, sp.tb1, sp.s_start, sp.eps, x0,
                                           sp.seed, max(steps), replica=base + i,
                                           checkpoints=steps))
            ys.append(walk.run_single_walk(sp.flow, sp.tb2, sp.s_start, sp.eps, y0,
                                           sp.seed, max(steps), replica=base + n + i,
                                           checkpoints=steps))
        out = []
        d = sp.flow.dim
        for k, t in enumerate(sp.checkpoints):
            X = np.array([p.X[k] for p in xs])
            Y = np.array([p.X[k] for p in ys])
            Xc = [int(p.charts[k]) for p in xs]
            Yc = [int(p.charts[k]) for p in ys]
            C = l_cost_matrix(sp.flow, X, Xc, sp.tb1 * t, Y, Yc, sp.tb2 * t,
                              solver=sp.solver)
            cp = optimal_assignment(C)
            out.append(lgeo.theta_value(sp.tb1, sp.tb2, t, cp.cost, d))
        diag_cost = float(np.mean(np.diag(C)))
        return out, lgeo.theta_value(sp.tb1, sp.tb2, sp.checkpoints[-1], diag_cost, d)


def experiment_transport_cost(spec: ExperimentSpec, workers=1) -> ExperimentReport:
    if spec.kind is not ExperimentKind.TRANSPORT:
        raise SpecError("wrong experiment kind")
    rep = ExperimentReport(spec.kind.value)
    if not spec.checkpoints or spec.batches == 0:
        rep.diagnostics["note"] = "nothing to run"
        return rep
    rows = _map(_TransportBatch(spec), range(spec.batches), workers)
    S = np.array([r[0] for r in rows], dtype=float)
    for k, t in enumerate(spec.checkpoints):
        m, se = mean_se(S[:, k])
        rep.checkpoints.append({"t": t, "mean": m, "se": se, "n": spec.batches})
    pairs = paired_monotone(S, spec.band)
    rep.criteria.append({"name": "paired_monotone", "band_se": spec.band,
                         "pairs": pairs, "ok": all(p["ok"] for p in pairs)})
    rep.passed = all(c["ok"] for c in rep.criteria)
    diag_m, _ = mean_se([r[1] for r in rows])
    rep.diagnostics.update(points=spec.points, batches=spec.batches,
                           identity_coupling_theta_last=diag_m)
    return rep


# --------------------------------------------------------------------------
# identity suite


def random_point(flow: FlowManifold, rng, spread=0.6) -> Point:
    """Random chart point: uniform on the torus, uniform on the sphere, ball-limited on H^d."""
    dc = flow.curved_dim
    c = np.empty(flow.dim)
    chart = 0
    if dc:
        if flow.kappa > 0:
            g = rng.standard_normal(dc + 1)
            c[:dc], chart = flow.unembed(g / np.linalg.norm(g))
        else:
            g = rng.standard_normal(dc)
            c[:dc] = g / np.linalg.norm(g) * spread * rng.random() ** (1.0 / dc)
    if flow.flat_dim:
        c[dc:] = rng.random(flow.flat_dim) * np.array(flow.periods)
    return flow.canonical(Point(c, chart))


def random_tangent(flow, rng, scale=1.0):
    return rng.standard_normal(flow.dim) * scale


@dataclass
class CheckResult:
    name: str
    trials: int = 0
    passed: int = 0
    max_error: float = 0.0
    skipped: int = 0
    note: str = ""

    def add(self, ok, err=0.0):
        self.trials += 1
        self.passed += int(bool(ok))
        if math.isfinite(err):
            self.max_error = max(self.max_error, float(err))

    @property
    def ok(self):
        return self.passed == self.trials

    def as_dict(self):
        return {"name": self.name, "trials": self.trials, "passed": self.passed,
                "max_error": self.max_error, "skipped": self.skipped,
                "note": self.note, "ok": self.ok}


def _fd_pack(flow, x, tau, h=1e-4):
    """Central-difference tau-derivatives of g and R at x."""
    gp = flow.metric(x, tau + h)
    gm = flow.metric(x, tau - h)
    Rp = float(flow.scalar_curvature(tau + h))
    Rm = float(flow.scalar_curvature(tau - h))
    return (gp - gm) / (2 * h), (Rp - Rm) / (2 * h)


def _fd_laplacian_R(flow, x: Point, tau, h=1e-4):
    """Delta R by finite differences of R along coordinates (R is spatially constant)."""
    # R depends on tau only for every model, but evaluate it through the chart anyway
    pack = flow.curvature_pack(_stp(x, tau))
    f0 = pack.scalar
    lap = 0.0
    gi = np.diag(pack.ginv)
    for k in range(flow.dim):
        e = np.zeros(flow.dim)
        e[k] = h
        fp = flow.curvature_pack(_stp(Point(x.coords + e, x.chart), tau)).scalar
        fm = flow.curvature_pack(_stp(Point(x.coords - e, x.chart), tau)).scalar
        lap += gi[k] * (fp - 2 * f0 + fm) / h**2
    return lap


def _stp(x, tau):
    from lcoupling.geometry import SpaceTimePoint

    return SpaceTimePoint(x, tau)


def _tau_sample(flow, rng, margin=2e-4):
    return float(flow.tau_min + margin + rng.random() * (flow.tau_max - flow.tau_min - 2 * margin))


def geometry_checks(flow: FlowManifold, trials: int, rng) -> list:
    from lcoupling.geometry import metric_comparison_bound

    names = ["flow_equation", "curvature_identity_analytic", "curvature_identity_fd",
             "contracted_bianchi", "rm_symmetries", "frozen_exp_speed",
             "metric_comparison"]
    res = {n: CheckResult(n) for n in names}
    for _ in range(trials):
        x = random_point(flow, rng)
        tau = _tau_sample(flow, rng)
        pk = flow.curvature_pack(_stp(x, tau))
        dg, dR = _fd_pack(flow, x, tau)
        e = float(np.max(np.abs(dg - 2 * pk.ricci)))
        res["flow_equation"].add(e <= 1e-6, e)
        dR_exact = -2.0 * float(flow.ricci_norm2(tau)) if flow.curved_dim else 0.0
        e = abs(dR_exact + pk.laplacian_scalar + 2 * pk.ricci_norm2)
        res["curvature_identity_analytic"].add(e <= 1e-8, e)
        e = abs(dR + _fd_laplacian_R(flow, x, tau) + 2 * pk.ricci_norm2)
        res["curvature_identity_fd"].add(e <= 1e-6, e)
        # div Ric: nabla Ric vanishes identically; compare with 1/2 grad R
        div = np.einsum("ij,ijk->k", pk.ginv, pk.nabla_ricci)
        e = float(np.max(np.abs(div - 0.5 * pk.g @ pk.grad_scalar)))
        res["contracted_bianchi"].add(e <= 1e-8, e)
        Rm = pk.riemann
        e = max(float(np.max(np.abs(Rm + Rm.transpose(1, 0, 2, 3)))),
                float(np.max(np.abs(Rm + Rm.transpose(0, 1, 3, 2)))),
                float(np.max(np.abs(Rm - Rm.transpose(2, 3, 0, 1)))),
                float(np.max(np.abs(np.einsum("ik,ijkl->jl", pk.ginv, Rm) - pk.ricci))),
                abs(float(np.einsum("ij,ij->", pk.ginv, pk.ricci)) - pk.scalar))
        res["rm_symmetries"].add(e <= 1e-10, e)
        v = random_tangent(flow, rng, 0.5)
        g0 = float(flow.norm2(tau, x.coords, v))
        if flow.curved_dim and flow.kappa > 0 and g0 >= (math.pi ** 2) * float(flow.scale(tau)):
            v *= 0.5
            g0 = float(flow.norm2(tau, x.coords, v))
        from lcoupling import _kernels

        out = _kernels.integrate(flow.kernel_params, x.coords.copy(), x.chart, v.copy(),
                                 np.zeros((0, flow.dim)), 0.0, 1.0, 256, 1, True)
        xs, ps = out[0], out[1]
        sp = flow.norm2(tau, xs, ps)
        e = float(np.max(np.abs(sp - g0))) / max(g0, 1e-300)
        res["frozen_exp_speed"].add(e <= 1e-8, e)
        t1 = _tau_sample(flow, rng)
        t2 = _tau_sample(flow, rng)
        t1, t2 = min(t1, t2), max(t1, t2)
        lo, hi = metric_comparison_bound(flow, t1, t2, x, v)
        n1 = float(flow.norm2(t1, x.coords, v))
        res["metric_comparison"].add(lo * (1 - 1e-12) <= n1 <= hi * (1 + 1e-12))
    return [r.as_dict() for r in res.values()]


def _pair(flow, rng, tb1=1.0, tb2=4.0):
    """Random endpoints and a scale time t with tb2 t <= T."""
    x = random_point(flow, rng)
    y = random_point(flow, rng)
    lo = max(1.0, flow.tau_min / tb1) if tb1 > 0 else 1.0
    hi = flow.tau_max / tb2
    t = lo + 0.01 + rng.random() * (hi - lo - 0.02)
    return x, y, t


def dlambda_fd(flow, tb1, tb2, t, x, y, h=1e-4):
    """Central difference of t -> L(x, tb1 t; y, tb2 t), fourth order."""
    hi = flow.tau_max / tb2 - t
    lo = t - flow.tau_min / tb1 if tb1 > 0 else t
    h = min(h, 0.5 * hi, 0.5 * lo) if min(hi, lo) > 0 else h

    def lam(tt):
        return lgeo.solve_min_lgeodesic(flow, x, tb1 * tt, y, tb2 * tt, method="shoot",
                                        audit=False).action

    return (8 * (lam(t + h) - lam(t - h)) - (lam(t + 2 * h) - lam(t - 2 * h))) / (12 * h)


def lgeo_checks(flow: FlowManifold, trials: int, rng, hessian=True) -> list:
    names = ["transport_isometry", "sandwich_bound", "velocity_bound",
             "first_variation", "dlambda_forms", "dlambda_fd", "shoot_round_trip",
             "hessian_bound", "combined_inequality"]
    res = {n: CheckResult(n) for n in names}
    for _ in range(trials):
        x, y, t = _pair(flow, rng)
        tau1, tau2 = t, 4.0 * t
        try:
            r = lgeo.solve_min_lgeodesic(flow, x, tau1, y, tau2)
        except lgeo.SolverError:
            for n in names:
                res[n].skipped += 1
            continue
        frame = flow.section_frame(tau1, x)
        tm = lgeo.transport_map(r.curve, frame)
        e = tm.gram_drift()
        res["transport_isometry"].add(e <= 1e-7, e)
        lo, hi = lgeo.l_sandwich(flow, x, tau1, y, tau2)
        res["sandwich_bound"].add(lo - 1e-9 <= r.action <= hi + 1e-9,
                                  max(0.0, lo - r.action, r.action - hi))
        _, _, vb = lgeo.velocity_bound(flow, tau1, tau2, flow.rho(flow.tau_max, x, y))
        v = lgeo.max_tau_speed2(r.curve)
        res["velocity_bound"].add(v <= vb * (1 + 1e-6) + 1e-9, max(0.0, v - vb))
        u = rng.standard_normal(flow.dim)
        u /= np.linalg.norm(u)
        fv = lgeo.first_variation_check(flow, 1.0, 4.0, t, x, y, u)
        e = abs(fv.finite_difference - fv.formula) / (1e-3 + abs(fv.formula))
        res["first_variation"].add(e <= 1e-3, e)
        dl = lgeo.dLambda_dt(flow, 1.0, 4.0, t, r)
        e = abs(dl.boundary - dl.integral) / (1.0 + abs(dl.integral))
        res["dlambda_forms"].add(e <= 1e-4, e)
        e = abs(dlambda_fd(flow, 1.0, 4.0, t, x, y) - dl.boundary) / (1e-3 + abs(dl.boundary))
        res["dlambda_fd"].add(e <= 1e-3, e)
        c = lgeo.shoot(flow, x, tau1, r.initial_Z, tau2)
        rT = flow.rho(flow.tau_max, x, y)
        e = flow.rho(flow.tau_max, c.end, y)
        res["shoot_round_trip"].add(e <= 1e-6 * max(rT, 1e-3), e)
        if hessian:
            if r.multiplicity_hint > 1:
                res["hessian_bound"].skipped += 1
                res["combined_inequality"].skipped += 1
                continue
            hr = lgeo.hessian_bound_check(flow, 1.0, 4.0, t, x, y)
            res["hessian_bound"].add(hr.hessian_ok, max(0.0, hr.lhs - hr.rhs))
            res["combined_inequality"].add(hr.combined_ok,
                                           max(0.0, hr.combined_lhs - hr.combined_rhs))
    return [r.as_dict() for r in res.values()]


def walk_checks(flow: FlowManifold, trials: int, rng, steps=5) -> list:
    names = ["frame_orthonormal", "increment_isometry", "theta_floor", "grid_identity"]
    res = {n: CheckResult(n) for n in names}
    for k in range(trials):
        x, y, _ = _pair(flow, rng)
        eps = 0.05
        cfg = walk.WalkConfig(flow, 1.0, 4.0, 1.0, eps, tuple(x.coords), tuple(y.coords),
                              seed=int(rng.integers(2**32)), max_steps=steps,
                              x0_chart=x.chart, y0_chart=y.chart)
        path = walk.run_coupled_walk(cfg)
        if path.aborted:
            for n in names:
                res[n].skipped += 1
            continue
        e = 0.0
        for i in range(len(path.t)):
            X = Point(path.X[i], path.Xchart[i])
            tau = cfg.tb1 * path.t[i]
            F = flow.section_frame(tau, X)
            e = max(e, float(np.max(np.abs(F @ flow.metric(X, tau) @ F.T - np.eye(flow.dim)))))
        res["frame_orthonormal"].add(e <= 1e-9, e)
        e = max(path.iso_dev, default=0.0)
        res["increment_isometry"].add(e <= 1e-8, e)
        fl = [walk.theta_floor(flow, 1.0, 4.0, t) for t in path.t]
        res["theta_floor"].add(all(th >= f - 1e-9 for th, f in zip(path.Theta, fl)))
        e = max(abs(t - min(cfg.s_start + eps**2 * n, flow.tau_max / cfg.tb2))
                for n, t in enumerate(path.t))
        res["grid_identity"].add(e == 0.0, e)
    return [r.as_dict() for r in res.values()]


def experiment_identity_suite(spec: ExperimentSpec, workers=1, hessian=True) -> ExperimentReport:
    if spec.kind is not ExperimentKind.IDENTITY:
        raise SpecError("wrong experiment kind")
    rep = ExperimentReport(spec.kind.value)
    if spec.trials == 0:
        rep.diagnostics["note"] = "empty battery"
        return rep
    rng = walk.replica_rng(spec.seed, 3_000_000)
    checks = []
    for module, fn in (("geometry", geometry_checks), ("lgeo", lgeo_checks),
                       ("walk", walk_checks)):
        sub = np.random.Generator(np.random.Philox(rng.integers(2**63)))
        kw = {"hessian": hessian} if module == "lgeo" else {}
        for c in fn(spec.flow, spec.trials, sub, **kw):
            c["module"] = module
            checks.append(c)
    rep.criteria = checks
    rep.passed = all(c["ok"] for c in checks)
    rep.diagnostics.update(flow=spec.flow.to_json(), trials=spec.trials)
    return rep


def run_experiment(spec: ExperimentSpec, workers=1) -> ExperimentReport:
    fn = {ExperimentKind.SUPERMARTINGALE: experiment_supermartingale,
          ExperimentKind.SIGMA: experiment_sigma_inequality,
          ExperimentKind.TRANSPORT: experiment_transport_cost,
          ExperimentKind.IDENTITY: experiment_identity_suite}[spec.kind]
    return fn(spec, workers=workers)


def default_flows() -> dict:
    """Built-in flows for `verify`: one of each model kind on [1, 8]."""
    return {
        "torus": FlowManifold.flat_torus(2, [2.0, 2.0], 1.0, 8.0),
        "sphere": FlowManifold.round_sphere(2, 1.0, 1.0, 8.0),
        "hyperbolic": FlowManifold.hyperbolic(2, 30.0, 1.0, 8.0),
        "product": FlowManifold.sphere_torus(2, 1, 1.0, [2.0], 1.0, 8.0),
    }

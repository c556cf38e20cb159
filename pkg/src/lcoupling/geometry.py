"""Closed-form model backwards Ricci flows.

Every model is a product of a conformally flat block (round sphere in
stereographic charts, hyperbolic space in the Poincare ball) and a flat
torus block.  On the curved block the metric is

    g(tau) = a(tau) * 4 / (1 + kappa |u|^2)^2 * delta,
    a(tau) = a0 + 2 kappa (dc - 1) (tau - tau_min),

so that dg/dtau = 2 Ric holds identically.  All models are locally
symmetric: grad R, Hess R, Delta R, dRic/dtau and nabla Ric vanish.

Curvature sign convention: Rm(X, Y, X, Y) is the sectional curvature of the
plane X ^ Y (positive on the sphere) and Ric_jl = g^ik Rm_ijkl.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

HANDOFF_RADIUS = 2.0
TAU_SLACK = 1e-12


class GeometryError(ValueError):
    """Invalid flow parameters, points or times."""


class FlowKind(str, enum.Enum):
    FLAT_TORUS = "FlatTorus"
    ROUND_SPHERE = "RoundSphere"
    HYPERBOLIC = "HyperbolicSpace"
    SPHERE_TORUS = "ProductSphereTorus"


@dataclass(frozen=True, eq=False)
class Point:
    """Chart coordinates plus chart id.

    Chart 0/1 are the stereographic charts from the north/south pole on the
    sphere block; every other model has a single chart 0.  Torus coordinates
    are lifted (not reduced) unless the point went through `canonical`.
    """

    coords: np.ndarray
    chart: int = 0

    def __post_init__(self):
        c = np.array(self.coords, dtype=float).reshape(-1)
        c.flags.writeable = False
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "chart", int(self.chart))

    def __repr__(self):
        return f"Point({self.coords.tolist()}, chart={self.chart})"


def as_point(x) -> Point:
    return x if isinstance(x, Point) else Point(x)


@dataclass(frozen=True, eq=False)
class SpaceTimePoint:
    x: Point
    tau: float


@dataclass(frozen=True, eq=False)
class TangentVec:
    base: SpaceTimePoint
    components: np.ndarray


@dataclass(frozen=True, eq=False)
class Frame:
    base: SpaceTimePoint
    vectors: np.ndarray  # (d, d), row i is the i-th frame vector


@dataclass(frozen=True, eq=False)
class CurvaturePack:
    g: np.ndarray
    ginv: np.ndarray
    christoffel: np.ndarray  # [k, i, j] = Gamma^k_ij
    riemann: np.ndarray  # [i, j, k, l], fully lowered
    ricci: np.ndarray
    ricci_sharp: np.ndarray  # [i, j] = Ric^i_j
    scalar: float
    grad_scalar: np.ndarray  # vector (index up)
    hess_scalar: np.ndarray
    laplacian_scalar: float
    ricci_norm2: float
    dricci_dtau: np.ndarray
    nabla_ricci: np.ndarray  # [i, j, k] = (nabla_k Ric)_ij


@dataclass(frozen=True, eq=False)
class FlowManifold:
    """A model backwards Ricci flow on [tau_min, tau_max]."""

    kind: FlowKind
    dim: int
    tau_min: float
    tau_max: float
    curved_dim: int = 0
    kappa: float = 0.0
    scale0: float = 1.0
    periods: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.tau_min < self.tau_max:
            raise GeometryError("tau_min must be smaller than tau_max")
        if self.tau_min < 0:
            raise GeometryError("flow times must be non-negative")
        if self.curved_dim + len(self.periods) != self.dim:
            raise GeometryError("block dimensions do not add up to dim")
        if self.curved_dim:
            if self.curved_dim < 2:
                raise GeometryError("curved block needs dimension >= 2")
            if self.scale0 <= 0:
                raise GeometryError("initial scale must be positive")
            if self.scale_at(self.tau_max) <= 0:
                raise GeometryError(
                    "metric degenerates before tau_max (hyperbolic extinction)")
        if any(p <= 0 for p in self.periods):
            raise GeometryError("torus periods must be positive")

    # ---- constructors -------------------------------------------------

    @classmethod
    def flat_torus(cls, dim, periods=None, tau_min=1.0, tau_max=8.0):
        periods = tuple(float(p) for p in (periods or [1.0] * dim))
        if len(periods) != dim:
            raise GeometryError("need one period per axis")
        return cls(FlowKind.FLAT_TORUS, dim, float(tau_min), float(tau_max),
                   periods=periods)

    @classmethod
    def round_sphere(cls, dim, r0=1.0, tau_min=1.0, tau_max=8.0):
        return cls(FlowKind.ROUND_SPHERE, dim, float(tau_min), float(tau_max),
                   curved_dim=dim, kappa=1.0, scale0=float(r0) ** 2)

    @classmethod
    def hyperbolic(cls, dim, c0=1.0, tau_min=1.0, tau_max=8.0):
        return cls(FlowKind.HYPERBOLIC, dim, float(tau_min), float(tau_max),
                   curved_dim=dim, kappa=-1.0, scale0=float(c0))

    @classmethod
    def sphere_torus(cls, sphere_dim, torus_dim, r0=1.0, periods=None,
                     tau_min=1.0, tau_max=8.0):
        periods = tuple(float(p) for p in (periods or [1.0] * torus_dim))
        if len(periods) != torus_dim:
            raise GeometryError("need one period per torus axis")
        return cls(FlowKind.SPHERE_TORUS, sphere_dim + torus_dim,
                   float(tau_min), float(tau_max), curved_dim=sphere_dim,
                   kappa=1.0, scale0=float(r0) ** 2, periods=periods)

    # ---- serialization ------------------------------------------------

    def to_json(self) -> dict:
        if self.kind is FlowKind.FLAT_TORUS:
            params = {"periods": list(self.periods)}
        elif self.kind is FlowKind.ROUND_SPHERE:
            params = {"r0": math.sqrt(self.scale0)}
        elif self.kind is FlowKind.HYPERBOLIC:
            params = {"c0": self.scale0}
        else:
            params = {"sphere_dim": self.curved_dim,
                      "r0": math.sqrt(self.scale0),
                      "periods": list(self.periods)}
        return {"kind": self.kind.value, "dim": self.dim, "params": params,
                "tau_min": self.tau_min, "tau_max": self.tau_max}

    @classmethod
    def from_json(cls, obj: dict) -> "FlowManifold":
        try:
            kind = FlowKind(obj["kind"])
            dim = int(obj["dim"])
            p = dict(obj.get("params", {}))
            times = dict(tau_min=obj.get("tau_min", 1.0),
                         tau_max=obj.get("tau_max", 8.0))
        except (KeyError, ValueError) as exc:
            raise GeometryError(f"bad flow description: {exc}") from exc
        if kind is FlowKind.FLAT_TORUS:
            return cls.flat_torus(dim, p.get("periods"), **times)
        if kind is FlowKind.ROUND_SPHERE:
            return cls.round_sphere(dim, p.get("r0", 1.0), **times)
        if kind is FlowKind.HYPERBOLIC:
            return cls.hyperbolic(dim, p.get("c0", 1.0), **times)
        d1 = int(p.get("sphere_dim", 2))
        return cls.sphere_torus(d1, dim - d1, p.get("r0", 1.0),
                                p.get("periods"), **times)

    # ---- scalar structure ---------------------------------------------

    @property
    def flat_dim(self) -> int:
        return len(self.periods)

    @property
    def has_handoff(self) -> bool:
        return self.curved_dim > 0 and self.kappa > 0

    @property
    def kernel_params(self) -> np.ndarray:
        """Packed parameters consumed by the compiled integrators."""
        return np.array([self.curved_dim, self.flat_dim, self.kappa,
                         self.scale0, self.tau_min], dtype=float)

    def check_tau(self, tau):
        if isinstance(tau, (float, int)):
            if not (self.tau_min - TAU_SLACK <= tau <= self.tau_max + TAU_SLACK):
                raise GeometryError(
                    f"time {tau} outside [{self.tau_min}, {self.tau_max}]")
            return
        t = np.asarray(tau, dtype=float)
        if np.any(t < self.tau_min - TAU_SLACK) or np.any(
                t > self.tau_max + TAU_SLACK):
            raise GeometryError(
                f"time {tau} outside [{self.tau_min}, {self.tau_max}]")

    def scale_at(self, tau):
        dc = self.curved_dim
        if not isinstance(tau, (float, int)):
            tau = np.asarray(tau, dtype=float)
        return self.scale0 + 2.0 * self.kappa * (dc - 1) * (tau - self.tau_min)

    def scale(self, tau):
        """a(tau): r(tau)^2 on the sphere, c(tau) on hyperbolic space."""
        self.check_tau(tau)
        a = self.scale_at(tau)
        if isinstance(a, float):
            if a <= 0:
                raise GeometryError("degenerate metric")
            return a
        if np.any(a <= 0):
            raise GeometryError("degenerate metric")
        return a

    def scalar_curvature(self, tau):
        if not self.curved_dim:
            return np.zeros_like(np.asarray(tau, dtype=float))
        dc = self.curved_dim
        return self.kappa * dc * (dc - 1) / self.scale(tau)

    def ricci_coef(self, tau):
        """Ric^# = ricci_coef * Id on the curved block, 0 on the flat block."""
        if not self.curved_dim:
            return np.zeros_like(np.asarray(tau, dtype=float))
        return self.kappa * (self.curved_dim - 1) / self.scale(tau)

    def ricci_norm2(self, tau):
        if not self.curved_dim:
            return np.zeros_like(np.asarray(tau, dtype=float))
        dc = self.curved_dim
        return dc * (dc - 1) ** 2 / self.scale(tau) ** 2

    def sectional(self, tau):
        if not self.curved_dim:
            return np.zeros_like(np.asarray(tau, dtype=float))
        return self.kappa / self.scale(tau)

    @property
    def C0(self) -> float:
        """Bound on |Rm| v |Ric| over the whole time interval."""
        dc = self.curved_dim
        if dc == 0:
            return 0.0
        a_min = min(self.scale_at(self.tau_min), self.scale_at(self.tau_max))
        k = 1.0 / a_min
        rm = k * math.sqrt(2.0 * dc * (dc - 1))
        ric = k * (dc - 1) * math.sqrt(dc)
        return float(max(rm, ric))

    @property
    def C0_prime(self) -> float:
        # nabla Rm vanishes identically on every model flow
        return 0.0

    # ---- pointwise metric ---------------------------------------------

    def conformal(self, xs):
        """4 / (1 + kappa |u|^2)^2 for the curved block of chart coords."""
        u = np.asarray(xs, dtype=float)[..., : self.curved_dim]
        return 4.0 / (1.0 + self.kappa * np.sum(u * u, axis=-1)) ** 2

    def metric_diag(self, tau, xs):
        """Diagonal of g(tau) at chart points `xs` (shape (..., d))."""
        xs = np.asarray(xs, dtype=float)
        diag = np.ones(xs.shape, dtype=float)
        if self.curved_dim:
            f = np.asarray(self.scale(tau)) * self.conformal(xs)
            diag[..., : self.curved_dim] = np.asarray(f)[..., None]
        return diag

    def metric(self, x, tau) -> np.ndarray:
        x = as_point(x)
        return np.diag(self.metric_diag(tau, x.coords))

    def norm2(self, tau, xs, vs):
        return np.sum(self.metric_diag(tau, xs) * np.asarray(vs) ** 2, axis=-1)

    def inner_batch(self, tau, xs, vs, ws):
        return np.sum(self.metric_diag(tau, xs) * np.asarray(vs)
                      * np.asarray(ws), axis=-1)

    def ricci_form(self, tau, xs, vs, ws):
        """Ric(v, w) = kappa (dc-1) g_std(v, w) on the curved block."""
        if not self.curved_dim:
            return np.zeros(np.shape(vs)[:-1])
        dc = self.curved_dim
        v = np.asarray(vs)[..., :dc]
        w = np.asarray(ws)[..., :dc]
        return self.kappa * (dc - 1) * self.conformal(xs) * np.sum(
            v * w, axis=-1)

    def dphi(self, x):
        """Gradient of the log conformal factor (curved block, zeros else)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        dc = self.curved_dim
        if dc:
            u = x[..., :dc]
            q = 1.0 + self.kappa * np.sum(u * u, axis=-1, keepdims=True)
            out[..., :dc] = -2.0 * self.kappa * u / q
        return out

    def christoffel(self, x) -> np.ndarray:
        """Gamma^k_ij of g(tau); tau-independent for every model."""
        x = as_point(x)
        d, dc = self.dim, self.curved_dim
        G = np.zeros((d, d, d))
        if dc:
            f = self.dphi(x.coords)[:dc]
            eye = np.eye(dc)
            G[:dc, :dc, :dc] = (np.einsum("ki,j->kij", eye, f)
                                + np.einsum("kj,i->kij", eye, f)
                                - np.einsum("ij,k->kij", eye, f))
        return G

    def curvature_pack(self, p: SpaceTimePoint) -> CurvaturePack:
        x, tau = as_point(p.x), float(p.tau)
        self.check_chart(x)
        d, dc = self.dim, self.curved_dim
        g = self.metric(x, tau)
        ginv = np.diag(1.0 / np.diag(g))
        Rm = np.zeros((d, d, d, d))
        Ric = np.zeros((d, d))
        if dc:
            K = float(self.sectional(tau))
            gc = g[:dc, :dc]
            Rm[:dc, :dc, :dc, :dc] = K * (np.einsum("ik,jl->ijkl", gc, gc)
                                          - np.einsum("il,jk->ijkl", gc, gc))
            w = float(self.conformal(x.coords))
            Ric[:dc, :dc] = self.kappa * (dc - 1) * w * np.eye(dc)
        zeros2 = np.zeros((d, d))
        return CurvaturePack(
            g=g, ginv=ginv, christoffel=self.christoffel(x), riemann=Rm,
            ricci=Ric, ricci_sharp=ginv @ Ric,
            scalar=float(self.scalar_curvature(tau)),
            grad_scalar=np.zeros(d), hess_scalar=zeros2,
            laplacian_scalar=0.0, ricci_norm2=float(self.ricci_norm2(tau)),
            dricci_dtau=zeros2.copy(), nabla_ricci=np.zeros((d, d, d)))

    # ---- charts -------------------------------------------------------

    def check_chart(self, x: Point):
        if x.coords.shape != (self.dim,):
            raise GeometryError(f"expected {self.dim} coordinates")
        if not np.all(np.isfinite(x.coords)):
            raise GeometryError("non-finite coordinates")
        if x.chart not in ((0, 1) if self.has_handoff else (0,)):
            raise GeometryError(f"invalid chart id {x.chart}")
        if self.curved_dim and self.kappa < 0:
            if np.sum(x.coords[: self.curved_dim] ** 2) >= 1.0:
                raise GeometryError("point outside the Poincare ball")

    def switch_chart(self, x: Point, vectors=None):
        """Move a point (and tangent vectors at it) to the other sphere chart."""
        dc = self.curved_dim
        c = x.coords.copy()
        u = x.coords[:dc].copy()
        uu = float(u @ u)
        if uu == 0.0:
            raise GeometryError("chart pole cannot be represented")
        c[:dc] = u / uu
        out = Point(c, 1 - x.chart)
        if vectors is None:
            return out
        V = np.array(vectors, dtype=float, copy=True)
        vc = V[..., :dc]
        V[..., :dc] = vc / uu - 2.0 * np.outer(vc @ u, u).reshape(vc.shape) / uu**2
        return out, V

    def to_chart(self, x: Point, chart: int, vectors=None):
        if x.chart == chart:
            return x if vectors is None else (x, np.array(vectors, float))
        if not self.has_handoff:
            raise GeometryError("this flow has a single chart")
        return self.switch_chart(x, vectors)

    def canonical(self, x, vectors=None):
        """Reduce torus coordinates mod periods, pick the sphere chart with |u| <= 1."""
        x = as_point(x)
        c = x.coords.copy()
        if self.flat_dim:
            P = np.array(self.periods)
            c[self.curved_dim:] = np.mod(c[self.curved_dim:], P)
        y = Point(c, x.chart)
        V = None if vectors is None else np.array(vectors, float)
        if self.has_handoff and float(c[: self.curved_dim] @ c[: self.curved_dim]) > 1.0:
            if V is None:
                y = self.switch_chart(y)
            else:
                y, V = self.switch_chart(y, V)
        return y if vectors is None else (y, V)

    # ---- embeddings of the curved block --------------------------------

    def embed(self, x: Point) -> np.ndarray:
        """Curved block as a unit vector in R^{dc+1} (sphere) or on the hyperboloid."""
        dc = self.curved_dim
        u = x.coords[:dc]
        uu = float(u @ u)
        if self.kappa > 0:
            sign = 1.0 if x.chart == 0 else -1.0
            return np.concatenate([2 * u, [sign * (uu - 1.0)]]) / (1.0 + uu)
        return np.concatenate([[1.0 + uu], 2 * u]) / (1.0 - uu)

    def embed_vector(self, x: Point, v) -> np.ndarray:
        dc = self.curved_dim
        u = x.coords[:dc]
        v = np.asarray(v, dtype=float)[..., :dc]
        uu = float(u @ u)
        if self.kappa > 0:
            sign = 1.0 if x.chart == 0 else -1.0
            q = 1.0 + uu
            head = 2.0 * (v * q - 2.0 * np.multiply.outer(v @ u, u)) / q**2
            tail = sign * 4.0 * (v @ u) / q**2
            return np.concatenate([head, np.asarray(tail)[..., None]], axis=-1)
        q = 1.0 - uu
        tail = 2.0 * (v * q + 2.0 * np.multiply.outer(v @ u, u)) / q**2
        head = 4.0 * (v @ u) / q**2
        return np.concatenate([np.asarray(head)[..., None], tail], axis=-1)

    def unembed(self, X, chart=None) -> tuple:
        """Inverse of `embed`; returns (curved coords, chart)."""
        X = np.asarray(X, dtype=float)
        if self.kappa > 0:
            if chart is None:
                chart = 0 if X[-1] <= 0 else 1
            denom = 1.0 - X[-1] if chart == 0 else 1.0 + X[-1]
            return X[:-1] / denom, chart
        return X[1:] / (1.0 + X[0]), 0

    def unembed_vector(self, X, V, chart):
        X = np.asarray(X, dtype=float)
        V = np.asarray(V, dtype=float)
        if self.kappa > 0:
            s = 1.0 if chart == 0 else -1.0
            den = 1.0 - s * X[-1]
            return V[..., :-1] / den + s * np.multiply.outer(V[..., -1], X[:-1]) / den**2
        den = 1.0 + X[0]
        return V[..., 1:] / den - np.multiply.outer(V[..., 0], X[1:]) / den**2

    # ---- frozen-metric geodesics ---------------------------------------

    def _torus_split(self, x: Point):
        return x.coords[: self.curved_dim], x.coords[self.curved_dim:]

    def exp(self, tau, x, v) -> Point:
        """Exponential map of the frozen metric g(tau) (closed form).

        Constant rescaling of the metric leaves geodesics unchanged, so the
        chart result does not depend on tau; tau is still range-checked.
        """
        self.check_tau(tau)
        x = as_point(x)
        v = np.asarray(v, dtype=float)
        dc = self.curved_dim
        if dc and self.kappa > 0:
            if self.norm2(tau, x.coords, v) >= math.pi**2 * float(self.scale(tau)):
                raise GeometryError("step too large for the sphere exponential")
        c = x.coords.copy()
        c[dc:] = c[dc:] + v[dc:]
        chart = x.chart
        if dc:
            X = self.embed(x)
            V = self.embed_vector(x, v)
            if self.kappa > 0:
                th = math.sqrt(float(V @ V))
                Y = X if th == 0 else math.cos(th) * X + math.sin(th) * V / th
            else:
                th2 = float(V[1:] @ V[1:] - V[0] ** 2)
                th = math.sqrt(max(th2, 0.0))
                Y = X if th == 0 else math.cosh(th) * X + math.sinh(th) * V / th
            c[:dc], chart = self.unembed(Y)
        return self.canonical(Point(c, chart))

    def exp_rk4(self, tau, x, v, n_steps=64) -> Point:
        """Exponential map by RK4 on the geodesic ODE (no closed form used)."""
        from lcoupling import _kernels

        self.check_tau(tau)
        x = as_point(x)
        out = _kernels.integrate(
            self.kernel_params, x.coords.copy(), x.chart,
            np.asarray(v, dtype=float).copy(), np.zeros((0, self.dim)),
            0.0, 1.0, int(n_steps), 1, False)
        xs, ps, charts, _, _, ok = out
        if not ok:
            raise GeometryError("geodesic integration blew up")
        return self.canonical(Point(xs[-1], charts[-1]))

    def log(self, tau, x, y, lift=None) -> np.ndarray:
        """Frozen-metric logarithm at x (chart vector); minimal unless `lift` given.

        `lift` selects a lattice translate of the torus block (integer vector).
        Antipodal sphere points get a deterministic choice of direction.
        """
        self.check_tau(tau)
        x, y = as_point(x), as_point(y)
        dc = self.curved_dim
        v = np.zeros(self.dim)
        if self.flat_dim:
            P = np.array(self.periods)
            diff = y.coords[dc:] - x.coords[dc:]
            k0 = -np.round(diff / P)
            k = k0 if lift is None else k0 + np.asarray(lift)
            v[dc:] = diff + k * P
        if dc:
            X, Y = self.embed(x), self.embed(y)
            if self.kappa > 0:
                cth = float(np.clip(X @ Y, -1.0, 1.0))
                th = math.acos(cth)
                W = Y - cth * X
                nw = math.sqrt(float(W @ W))
                if nw < 1e-14:
                    if th < 1.0:
                        return v
                    # antipodal: pick the first embedded axis orthogonal to X
                    E = np.eye(dc + 1)
                    W = E[int(np.argmin(np.abs(X)))] - X * X[int(np.argmin(np.abs(X)))]
                    nw = math.sqrt(float(W @ W))
                V = th * W / nw
            else:
                cth = max(1.0, float(X[0] * Y[0] - X[1:] @ Y[1:]))
                th = math.acosh(cth)
                W = Y - cth * X
                nw = math.sqrt(max(float(W[1:] @ W[1:] - W[0] ** 2), 0.0))
                V = np.zeros_like(X) if nw < 1e-300 else th * W / nw
            v[:dc] = self.unembed_vector(X, V, x.chart)
        return v

    def rho(self, tau, x, y) -> float:
        """g(tau)-distance."""
        x, y = as_point(x), as_point(y)
        dc = self.curved_dim
        total = 0.0
        if self.flat_dim:
            P = np.array(self.periods)
            diff = y.coords[dc:] - x.coords[dc:]
            diff = diff - np.round(diff / P) * P
            total += float(diff @ diff)
        if dc:
            a = float(self.scale(tau))
            X, Y = self.embed(x), self.embed(y)
            if self.kappa > 0:
                th = math.acos(float(np.clip(X @ Y, -1.0, 1.0)))
                # better conditioned for nearby points
                if th < 1e-3:
                    th = 2.0 * math.asin(min(1.0, 0.5 * float(np.linalg.norm(X - Y))))
            else:
                u, w = x.coords[:dc], y.coords[:dc]
                num = 2.0 * float((u - w) @ (u - w))
                den = (1.0 - float(u @ u)) * (1.0 - float(w @ w))
                th = math.acosh(1.0 + num / den)
            total += a * th * th
        else:
            self.check_tau(tau)
        return math.sqrt(total)

    def geodesic_path(self, x, v, sigmas, chart=None) -> tuple:
        """Points exp_x(sigma v) for an array of sigma, all in one chart.

        Returns (coords (n, d), chart).  Torus coordinates stay lifted.  The
        sphere chart is chosen to keep |u| small along the whole path unless
        given.
        """
        x = as_point(x)
        sig = np.asarray(sigmas, dtype=float)
        dc = self.curved_dim
        out = np.empty((sig.size, self.dim))
        out[:, dc:] = x.coords[dc:] + np.multiply.outer(sig, np.asarray(v)[dc:])
        ch = 0
        if dc:
            X = self.embed(x)
            V = self.embed_vector(x, v)
            if self.kappa > 0:
                th = math.sqrt(float(V @ V))
                E = V / th if th > 0 else np.zeros_like(V)
                Ys = (np.multiply.outer(np.cos(sig * th), X)
                      + np.multiply.outer(np.sin(sig * th), E))
                if chart is None:
                    h = Ys[:, -1]
                    chart = 0 if np.max(h) <= -np.min(h) else 1
                den = 1.0 - Ys[:, -1] if chart == 0 else 1.0 + Ys[:, -1]
                # a path through the projection pole gives inf/nan; callers check
                with np.errstate(divide="ignore", invalid="ignore"):
                    out[:, :dc] = Ys[:, :-1] / den[:, None]
                ch = chart
            else:
                th = math.sqrt(max(float(V[1:] @ V[1:] - V[0] ** 2), 0.0))
                E = V / th if th > 0 else np.zeros_like(V)
                Ys = (np.multiply.outer(np.cosh(sig * th), X)
                      + np.multiply.outer(np.sinh(sig * th), E))
                out[:, :dc] = Ys[:, 1:] / (1.0 + Ys[:, :1])
        return out, ch

    # ---- orthonormal frames -------------------------------------------

    def section_frame(self, tau, x) -> np.ndarray:
        """The measurable section Phi^(tau)(x): Gram-Schmidt of the coordinate basis.

        The metric is diagonal in every chart, so the result is e_i / sqrt(g_ii).
        """
        x = as_point(x)
        return np.diag(1.0 / np.sqrt(self.metric_diag(tau, x.coords)))


def metric_inner(flow: FlowManifold, tau, v: TangentVec, w: TangentVec) -> float:
    if v.base is not w.base and not (
            np.array_equal(v.base.x.coords, w.base.x.coords)
            and v.base.x.chart == w.base.x.chart):
        raise GeometryError("tangent vectors at different base points")
    return float(flow.inner_batch(tau, v.base.x.coords, v.components,
                                  w.components))


def gram_schmidt(flow: FlowManifold, tau, x, vectors, cond_max=1e12) -> np.ndarray:
    """Orthonormalize the rows of `vectors` w.r.t. g(tau) at x, in index order."""
    x = as_point(x)
    V = np.array(vectors, dtype=float)
    g = flow.metric(x, tau)
    gram = V @ g @ V.T
    if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > cond_max:
        raise GeometryError("vectors are (numerically) linearly dependent")
    out = np.empty_like(V)
    for i in range(V.shape[0]):
        w = V[i].copy()
        # two passes for stability
        for _ in range(2):
            for j in range(i):
                w -= (w @ g @ out[j]) * out[j]
        out[i] = w / math.sqrt(float(w @ g @ w))
    return out


def frozen_exp(flow: FlowManifold, tau, x, v) -> Point:
    return flow.exp(tau, x, v)


def rho(flow: FlowManifold, tau, x, y) -> float:
    return flow.rho(tau, x, y)


def curvature_pack(flow: FlowManifold, p: SpaceTimePoint) -> CurvaturePack:
    return flow.curvature_pack(p)


def h_form_matrix(pack: CurvaturePack, tau: float, gdot) -> np.ndarray:
    """Symmetric matrix M with H(gdot, Z) = Z^T M Z (all seven terms)."""
    gd = np.asarray(gdot, dtype=float)
    g = pack.g
    rs = pack.ricci_sharp
    M = (-2.0 * pack.dricci_dtau - pack.hess_scalar
         + 2.0 * rs.T @ g @ rs - pack.ricci / tau
         - 2.0 * np.einsum("ijkl,j,k->il", pack.riemann, gd, gd)
         - 4.0 * np.einsum("abk,k->ab", pack.nabla_ricci, gd)
         + 4.0 * np.einsum("jbi,j->ib", pack.nabla_ricci, gd))
    return 0.5 * (M + M.T)


def h_form(flow: FlowManifold, p: SpaceTimePoint, gdot, Z) -> float:
    """H(gdot, Z) from the second variation of the L-functional."""
    pack = flow.curvature_pack(p)
    Z = np.asarray(Z, dtype=float)
    return float(Z @ h_form_matrix(pack, float(p.tau), gdot) @ Z)


def h_form_nodes(flow: FlowManifold, taus, xs, gdots, Zs) -> np.ndarray:
    """Vectorized H(gdot, Z) along a curve, using the locally symmetric structure.

    taus (n,), xs/gdots (n, d), Zs (n, m, d) -> (n, m).
    """
    taus = np.asarray(taus, dtype=float)
    Zs = np.asarray(Zs, dtype=float)
    if not flow.curved_dim:
        return np.zeros(Zs.shape[:-1])
    dc = flow.curved_dim
    gd = np.asarray(gdots)[:, None, :dc]
    zc = Zs[..., :dc]
    diag = flow.metric_diag(taus, xs)[:, None, :dc]
    zz = np.sum(diag * zc * zc, axis=-1)
    gg = np.sum(diag * gd * gd, axis=-1)
    zg = np.sum(diag * zc * gd, axis=-1)
    rc = flow.ricci_coef(taus)[:, None]
    K = flow.sectional(taus)[:, None]
    # Rm(Z, g, g, Z) = K (<Z,g>^2 - |Z|^2 |g|^2)
    rm = K * (zg * zg - zz * gg)
    return 2.0 * rc * rc * zz - rc * zz / taus[:, None] - 2.0 * rm


def metric_comparison_bound(flow: FlowManifold, tau1, tau2, x, v) -> tuple:
    """Bracket for |v|^2_{g(tau1)} implied by |Ric| <= C0."""
    if tau1 > tau2:
        raise GeometryError("need tau1 <= tau2")
    x = as_point(x)
    n2 = float(flow.norm2(tau2, x.coords, v))
    k = 2.0 * flow.C0 * (tau2 - tau1)
    return math.exp(-k) * n2, math.exp(k) * n2


def h_form_bilinear_nodes(flow: FlowManifold, taus, xs, gdots, Zs) -> np.ndarray:
    """Polarized H(gdot; Z_i, Z_j) along a curve: (n, m, d) -> (n, m, m)."""
    taus = np.asarray(taus, dtype=float)
    Zs = np.asarray(Zs, dtype=float)
    n, m, _ = Zs.shape
    if not flow.curved_dim:
        return np.zeros((n, m, m))
    dc = flow.curved_dim
    diag = flow.metric_diag(taus, xs)[:, :dc]
    zc = Zs[..., :dc]
    gd = np.asarray(gdots)[:, :dc]
    G = np.einsum("nk,nik,njk->nij", diag, zc, zc)
    zg = np.einsum("nk,nik,nk->ni", diag, zc, gd)
    gg = np.einsum("nk,nk,nk->n", diag, gd, gd)
    rc = flow.ricci_coef(taus)[:, None, None]
    K = flow.sectional(taus)[:, None, None]
    rm = K * (np.einsum("ni,nj->nij", zg, zg) - G * gg[:, None, None])
    return 2.0 * rc * rc * G - rc * G / taus[:, None, None] - 2.0 * rm

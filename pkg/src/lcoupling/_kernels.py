"""Compiled RK4 integrators for curves on the model flows.

params = [curved_dim, flat_dim, kappa, a0, tau_min] (see FlowManifold.kernel_params).

mode 0: L-geodesic in s = sqrt(tau),
    x' = p,   p' = -Gamma(p, p) - 4 s Ric#(p)   (grad R vanishes),
    Z' = -Gamma(p, Z) - 2 s Ric#(Z),
    A' = |p|^2_{g(s^2)} / 2 + 2 s^2 R(s^2).
mode 1: geodesic of a frozen metric, Z parallel transported, A unused.
"""

import numpy as np
from numba import njit

BLOWUP = 1e6
HANDOFF2 = 4.0  # |u|^2 above which the sphere chart is swapped


@njit(cache=True, error_model='numpy', inline='always')
def _scale(params, tau):
    dc = params[0]
    return params[3] + 2.0 * params[2] * (dc - 1.0) * (tau - params[4])


@njit(cache=True, error_model='numpy', inline='always')
def _rhs(params, mode, s, x, p, Z, dx, dp, dZ):
    dc = int(params[0])
    d = x.shape[0]
    kappa = params[2]
    m = Z.shape[0]
    for i in range(d):
        dx[i] = p[i]
        dp[i] = 0.0
    for j in range(m):
        for i in range(d):
            dZ[j, i] = 0.0
    dA = 0.0
    if dc > 0:
        uu = 0.0
        for i in range(dc):
            uu += x[i] * x[i]
        invq = 1.0 / (1.0 + kappa * uu)
        c = -2.0 * kappa * invq  # grad of the log conformal factor is c * x
        fp = 0.0
        pp = 0.0
        for i in range(dc):
            fp += c * x[i] * p[i]
            pp += p[i] * p[i]
        for k in range(dc):
            dp[k] = -(2.0 * fp * p[k] - pp * c * x[k])
        for j in range(m):
            fz = 0.0
            pz = 0.0
            for i in range(dc):
                fz += c * x[i] * Z[j, i]
                pz += p[i] * Z[j, i]
            for k in range(dc):
                dZ[j, k] = -(fp * Z[j, k] + fz * p[k] - pz * c * x[k])
        if mode == 0:
            tau = s * s
            a = _scale(params, tau)
            inva = 1.0 / a
            rc = kappa * (dc - 1.0) * inva
            for k in range(dc):
                dp[k] -= 4.0 * s * rc * p[k]
            for j in range(m):
                for k in range(dc):
                    dZ[j, k] -= 2.0 * s * rc * Z[j, k]
            w = 4.0 * invq * invq
            R = kappa * dc * (dc - 1.0) * inva
            dA = 0.5 * a * w * pp + 2.0 * s * s * R
    if mode == 0:
        pf = 0.0
        for i in range(dc, d):
            pf += p[i] * p[i]
        dA += 0.5 * pf
    return dA


@njit(cache=True, error_model='numpy')
def _handoff(params, x, p, Z):
    dc = int(params[0])
    uu = 0.0
    for i in range(dc):
        uu += x[i] * x[i]
    up = 0.0
    for i in range(dc):
        up += x[i] * p[i]
    for j in range(Z.shape[0]):
        uz = 0.0
        for i in range(dc):
            uz += x[i] * Z[j, i]
        for i in range(dc):
            Z[j, i] = Z[j, i] / uu - 2.0 * x[i] * uz / (uu * uu)
    for i in range(dc):
        p[i] = p[i] / uu - 2.0 * x[i] * up / (uu * uu)
    for i in range(dc):
        x[i] = x[i] / uu


@njit(cache=True, error_model='numpy')
def integrate(params, x0, chart0, p0, Z0, s0, s1, n, mode, record):
    """RK4 with n uniform steps from s0 to s1.

    Returns (xs, ps, charts, Zs, A, ok).  With record=False only the final
    state is stored (arrays of length 1).
    """
    d = x0.shape[0]
    m = Z0.shape[0]
    dc = int(params[0])
    handoff = dc > 0 and params[2] > 0
    nrec = n + 1 if record else 1
    xs = np.empty((nrec, d))
    ps = np.empty((nrec, d))
    Zs = np.empty((nrec, m, d))
    charts = np.empty(nrec, dtype=np.int64)
    x = x0.copy()
    p = p0.copy()
    Z = Z0.copy()
    chart = chart0
    A = 0.0
    h = (s1 - s0) / n
    k1x = np.empty(d); k2x = np.empty(d); k3x = np.empty(d); k4x = np.empty(d)
    k1p = np.empty(d); k2p = np.empty(d); k3p = np.empty(d); k4p = np.empty(d)
    k1Z = np.empty((m, d)); k2Z = np.empty((m, d))
    k3Z = np.empty((m, d)); k4Z = np.empty((m, d))
    xt = np.empty(d); pt = np.empty(d); Zt = np.empty((m, d))
    if record:
        xs[0] = x; ps[0] = p; Zs[0] = Z; charts[0] = chart
    ok = True
    for step in range(n):
        s = s0 + step * h
        a1 = _rhs(params, mode, s, x, p, Z, k1x, k1p, k1Z)
        for i in range(d):
            xt[i] = x[i] + 0.5 * h * k1x[i]
            pt[i] = p[i] + 0.5 * h * k1p[i]
        for j in range(m):
            for i in range(d):
                Zt[j, i] = Z[j, i] + 0.5 * h * k1Z[j, i]
        a2 = _rhs(params, mode, s + 0.5 * h, xt, pt, Zt, k2x, k2p, k2Z)
        for i in range(d):
            xt[i] = x[i] + 0.5 * h * k2x[i]
            pt[i] = p[i] + 0.5 * h * k2p[i]
        for j in range(m):
            for i in range(d):
                Zt[j, i] = Z[j, i] + 0.5 * h * k2Z[j, i]
        a3 = _rhs(params, mode, s + 0.5 * h, xt, pt, Zt, k3x, k3p, k3Z)
        for i in range(d):
            xt[i] = x[i] + h * k3x[i]
            pt[i] = p[i] + h * k3p[i]
        for j in range(m):
            for i in range(d):
                Zt[j, i] = Z[j, i] + h * k3Z[j, i]
        a4 = _rhs(params, mode, s + h, xt, pt, Zt, k4x, k4p, k4Z)
        for i in range(d):
            x[i] += h / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i])
            p[i] += h / 6.0 * (k1p[i] + 2.0 * k2p[i] + 2.0 * k3p[i] + k4p[i])
        for j in range(m):
            for i in range(d):
                Z[j, i] += h / 6.0 * (k1Z[j, i] + 2.0 * k2Z[j, i]
                                      + 2.0 * k3Z[j, i] + k4Z[j, i])
        A += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if handoff:
            uu = 0.0
            for i in range(dc):
                uu += x[i] * x[i]
            if uu > HANDOFF2:
                _handoff(params, x, p, Z)
                chart = 1 - chart
        bad = False
        for i in range(d):
            if not (abs(x[i]) < 1e300) or not (abs(p[i]) < BLOWUP):
                bad = True
        if bad:
            ok = False
            break
        if record:
            xs[step + 1] = x; ps[step + 1] = p; Zs[step + 1] = Z
            charts[step + 1] = chart
    if not record:
        xs[0] = x; ps[0] = p; Zs[0] = Z; charts[0] = chart
    return xs, ps, charts, Zs, A, ok


@njit(cache=True, error_model='numpy')
def _endpoint(params, x0, chart0, z, s0, s1, n, target_chart):
    Z0 = np.empty((0, x0.shape[0]))
    xs, ps, charts, Zs, A, ok = integrate(params, x0, chart0, z, Z0,
                                          s0, s1, n, 0, False)
    x = xs[0].copy()
    if ok and charts[0] != target_chart:
        dc = int(params[0])
        uu = 0.0
        for i in range(dc):
            uu += x[i] * x[i]
        if uu == 0.0:
            ok = False
        else:
            for i in range(dc):
                x[i] = x[i] / uu
    return x, ok


@njit(cache=True, error_model='numpy')
def newton_shoot(params, x0, chart0, target, target_chart, s0, s1, n, z0,
                 maxit, tol):
    """Solve endpoint(z) = target for the initial s-velocity z.

    Damped Newton with forward-difference Jacobian and backtracking.
    Returns (z, residual_norm, iterations, ok).
    """
    d = x0.shape[0]
    z = z0.copy()
    x, ok = _endpoint(params, x0, chart0, z, s0, s1, n, target_chart)
    if not ok:
        return z, np.inf, 0, False
    r = x - target
    rn = np.sqrt(np.sum(r * r))
    J = np.empty((d, d))
    it = 0
    while it < maxit and rn > tol:
        it += 1
        for j in range(d):
            hj = 1e-7 * (1.0 + abs(z[j]))
            zj = z.copy()
            zj[j] += hj
            xj, okj = _endpoint(params, x0, chart0, zj, s0, s1, n, target_chart)
            if not okj:
                return z, rn, it, False
            for i in range(d):
                J[i, j] = (xj[i] - x[i]) / hj
        dz = np.linalg.solve(J, -r)
        lam = 1.0
        accepted = False
        for _ in range(30):
            zn = z + lam * dz
            xn, okn = _endpoint(params, x0, chart0, zn, s0, s1, n, target_chart)
            if okn:
                rnew = xn - target
                rnn = np.sqrt(np.sum(rnew * rnew))
                if rnn < (1.0 - 1e-4 * lam) * rn or rnn <= tol:
                    z = zn
                    x = xn
                    r = rnew
                    rn = rnn
                    accepted = True
                    break
            lam *= 0.5
        if not accepted:
            return z, rn, it, False
    return z, rn, it, rn <= tol

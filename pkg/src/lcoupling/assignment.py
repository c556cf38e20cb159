"""Exact linear assignment by shortest augmenting paths with potentials."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class EmpiricalCoupling:
    permutation: np.ndarray  # row i is matched to column permutation[i]
    cost: float  # mean matched cost
    u: np.ndarray  # row potentials
    v: np.ndarray  # column potentials

    @property
    def n(self) -> int:
        return self.permutation.size


class AssignmentError(ValueError):
    pass


def _solve(C):
    """Hungarian method (O(n^3)) on a square matrix; returns (col_of_row, u, v)."""
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    Cp = np.zeros((n + 1, n + 1))
    Cp[1:, 1:] = C
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = Cp[i0] - u[i0] - v
            upd = free & (cur < minv)
            minv[upd] = cur[upd]
            way[upd] = j0
            cand = np.where(free, minv, INF)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:], v[1:]


def optimal_assignment(costs, check=True, rtol=1e-9) -> EmpiricalCoupling:
    """Minimum-cost perfect matching with a complementary-slackness certificate."""
    C = np.asarray(costs, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise AssignmentError("cost matrix must be square")
    if C.shape[0] > 1024:
        raise AssignmentError("at most 1024 points supported")
    if not np.all(np.isfinite(C)):
        raise AssignmentError("cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return EmpiricalCoupling(np.zeros(0, dtype=np.int64), 0.0, np.zeros(0), np.zeros(0))
    perm, u, v = _solve(C)
    if check:
        certify(C, perm, u, v, rtol)
    total = float(np.sum(C[np.arange(n), perm]))
    return EmpiricalCoupling(perm, total / n, u, v)


def certify(C, perm, u, v, rtol=1e-9):
    """Dual feasibility u_i + v_j <= C_ij and tightness on the matching."""
    n = C.shape[0]
    if np.unique(perm).size != n:
        raise AssignmentError("matching is not a bijection")
    scale = 1.0 + float(np.max(np.abs(C)))
    slack = C - u[:, None] - v[None, :]
    if np.min(slack) < -rtol * scale:
        raise AssignmentError("dual infeasible potentials")
    if np.max(np.abs(slack[np.arange(n), perm])) > rtol * scale:
        raise AssignmentError("complementary slackness violated")
    return True

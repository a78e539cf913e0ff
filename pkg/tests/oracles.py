"""Independent reference computations used by the test-suite.

Everything here is deliberately naive: dense matrices, explicit scenario
trees and brute-force scans, solved with scipy's HiGHS interface directly.
"""
from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog


class _Builder:
    def __init__(self):
        self.n = 0
        self.cost = {}
        self.rows = []  # (dict col->coef, rhs) meaning sum coef*x >= rhs
        self.free = set()

    def var(self, k=1, free=False):
        out = np.arange(self.n, self.n + k)
        self.n += k
        if free:
            self.free.update(out.tolist())
        return out

    def ge(self, coefs, rhs):
        self.rows.append((coefs, rhs))

    def solve(self):
        c = np.zeros(self.n)
        for j, v in self.cost.items():
            c[j] += v
        A = np.zeros((len(self.rows), self.n))
        b = np.zeros(len(self.rows))
        for r, (coefs, rhs) in enumerate(self.rows):
            for j, v in coefs.items():
                A[r, j] += v
            b[r] = rhs
        bounds = [(None, None) if j in self.free else (0, None) for j in range(self.n)]
        res = linprog(c, A_ub=-A, b_ub=-b, bounds=bounds, method="highs")
        assert res.status == 0, res.message
        return res.fun, res.x


def _edge_costs(bld, data, x_cols, D, cum_terms, const_state, last):
    """Add penalty variables for one (node, realisation) edge; returns {col: weight}."""
    nv = D.shape[0]
    tum = np.flatnonzero(data.tumor)
    w = {}
    tp = bld.var(nv)
    for i in range(nv):
        row = {tp[i]: 1.0}
        for j, col in enumerate(x_cols):
            row[col] = row.get(col, 0.0) - D[i, j]
        bld.ge(row, -data.r_plus[i])
        w[tp[i]] = data.w_over[i]
    tm = bld.var(tum.size)
    for k, i in enumerate(tum):
        row = {tm[k]: 1.0}
        for j, col in enumerate(x_cols):
            row[col] = row.get(col, 0.0) + D[i, j]
        bld.ge(row, data.r_minus[i])
        w[tm[k]] = data.w_under[i]
    if last:
        # cumulative dose = const_state + sum over path of D_k x_k
        gp = bld.var(nv)
        for i in range(nv):
            row = {gp[i]: 1.0}
            for Dk, cols in cum_terms:
                for j, col in enumerate(cols):
                    row[col] = row.get(col, 0.0) - Dk[i, j]
            bld.ge(row, const_state[i] - data.t_plus[i])
            w[gp[i]] = data.a_over[i]
        gm = bld.var(tum.size)
        for k, i in enumerate(tum):
            row = {gm[k]: 1.0}
            for Dk, cols in cum_terms:
                for j, col in enumerate(cols):
                    row[col] = row.get(col, 0.0) + Dk[i, j]
            bld.ge(row, data.t_minus[i] - const_state[i])
            w[gm[k]] = data.a_under[i]
    return w


def tree_value(data, worst_case=False, f0=1, state=None):
    """Exact value of fractions f0..F from ``state`` on the full scenario tree.

    Risk-neutral: expectation over all P^(F-f0+1) paths.  ``worst_case``:
    the nested min-max recursion, written as one LP with an epigraph
    variable per decision node.
    """
    P, F, nb = data.P, data.F, data.n_beamlets
    state = np.zeros(data.n_voxels) if state is None else np.asarray(state, float)
    depth = F - f0 + 1
    bld = _Builder()
    xcols = {}
    for d in range(depth):
        for h in itertools.product(range(P), repeat=d):
            xcols[h] = bld.var(nb)
    tvar = {h: bld.var(1, free=True)[0] for h in xcols} if worst_case else None
    for h, cols in xcols.items():
        d = len(h)
        last = d == depth - 1
        prob = float(np.prod([data.probabilities[p] for p in h])) if h else 1.0
        for p in range(P):
            path = h + (p,)
            cum = [(data.doses[path[k]], xcols[path[:k]]) for k in range(d + 1)]
            w = _edge_costs(bld, data, cols, data.doses[p], cum, state, last)
            if worst_case:
                row = {tvar[h]: 1.0}
                for col, v in w.items():
                    row[col] = row.get(col, 0.0) - v
                if not last:
                    row[tvar[path]] = row.get(tvar[path], 0.0) - 1.0
                bld.ge(row, 0.0)
            else:
                for col, v in w.items():
                    bld.cost[col] = bld.cost.get(col, 0.0) + prob * data.probabilities[p] * v
    if worst_case:
        bld.cost[tvar[()]] = 1.0
    val, _ = bld.solve()
    return val


def enumerate_vertices(c, A, b):
    """min c.x s.t. A x <= b, x >= 0 by scanning all basic solutions (small n only)."""
    m, n = A.shape
    G = np.vstack([A, -np.eye(n)])
    h = np.concatenate([b, np.zeros(n)])
    best = np.inf
    for rows in itertools.combinations(range(m + n), n):
        M = G[list(rows)]
        if abs(np.linalg.det(M)) < 1e-10:
            continue
        x = np.linalg.solve(M, h[list(rows)])
        if (G @ x <= h + 1e-9).all():
            best = min(best, float(c @ x))
    return best


def brute_dilate(ctv, margin, grid):
    pts = grid.centers()
    src = grid.centers(np.asarray(ctv))
    out = []
    for k, p in enumerate(pts):
        if (np.sqrt(((src - p) ** 2).sum(axis=1)) <= margin + 1e-9).any():
            out.append(k)
    return np.array(out, dtype=np.int64)


def avar_tail_average(z, q, alpha):
    """AV@R as the average of the worst (1-alpha) probability mass."""
    order = np.argsort(-np.asarray(z), kind="stable")
    mass = 1.0 - alpha
    acc, total = 0.0, 0.0
    for i in order:
        take = min(q[i], mass - acc)
        if take <= 0:
            break
        total += take * z[i]
        acc += take
    return total / (1.0 - alpha)


def binomial_band(n, p, k=3.0):
    s = np.sqrt(n * p * (1 - p))
    return n * p - k * s, n * p + k * s

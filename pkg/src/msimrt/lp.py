"""Linear programs with typed rows and two interchangeable solvers.

``SimplexSolver`` is a bounded-variable revised simplex written against
numpy; ``HighsSolver`` forwards to HiGHS through ``highspy``.  Both return the
same :class:`LpSolution`, with row duals following the sensitivity
convention ``dual[i] = d(objective) / d(b[i])`` for a minimisation.
"""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

LE, EQ, GE = "<", "=", ">"

PRIMAL_TOL = 1e-7
DUAL_TOL = 1e-7
PIVOT_TOL = 1e-9


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITER_LIMIT = "iter_limit"


class ContractViolation(RuntimeError):
    """Raised when a solution is queried in a way its status does not allow."""


@dataclass
class LinearProgram:
    """``min c x  s.t.  A x (<,=,>) b,  lb <= x <= ub``."""

    c: np.ndarray
    A: sp.csr_matrix
    senses: np.ndarray
    b: np.ndarray
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        A = self.A if sp.issparse(self.A) else np.atleast_2d(np.asarray(self.A, dtype=float))
        if not sp.issparse(A) and A.size == 0:
            A = np.zeros((0, n))
        self.A = sp.csr_matrix(A, dtype=float)
        self.b = np.asarray(self.b, dtype=float).ravel()
        m = self.b.size
        self.senses = np.asarray(list(self.senses) if isinstance(self.senses, str) else self.senses, dtype="<U1").ravel()
        self.lb = np.zeros(n) if self.lb is None else np.asarray(self.lb, dtype=float).ravel().copy()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel().copy()
        if self.A.shape != (m, n):
            raise ValueError(f"A has shape {self.A.shape}, expected {(m, n)}")
        if self.senses.size != m or not np.isin(self.senses, (LE, EQ, GE)).all():
            raise ValueError("senses must hold one of '<', '=', '>' per row")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bounds must have one entry per column")
        if not (np.isfinite(self.c).all() and np.isfinite(self.b).all() and np.isfinite(self.A.data).all()):
            raise ValueError("LP coefficients must be finite")
        if (self.lb > self.ub).any():
            raise ValueError("lower bound exceeds upper bound")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape

    def row_activity(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x

    def primal_residual(self, x: np.ndarray) -> float:
        """Largest row or bound violation at ``x``."""
        ax = self.A @ x
        viol = np.zeros(self.b.size)
        le, eq, ge = self.senses == LE, self.senses == EQ, self.senses == GE
        viol[le] = np.maximum(ax[le] - self.b[le], 0.0)
        viol[ge] = np.maximum(self.b[ge] - ax[ge], 0.0)
        viol[eq] = np.abs(ax[eq] - self.b[eq])
        bnd = np.maximum(np.maximum(self.lb - x, x - self.ub), 0.0)
        return float(max(viol.max(initial=0.0), bnd.max(initial=0.0)))


@dataclass
class Basis:
    """Basic column indices over [structural | slack] columns plus nonbasic side flags."""

    basic: np.ndarray
    at_upper: np.ndarray


@dataclass
class LpSolution:
    status: Status
    x: np.ndarray | None = None
    objective: float = float("nan")
    duals: np.ndarray | None = None
    reduced_costs: np.ndarray | None = None
    basis: Basis | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def dual_wrt_rhs(sol: LpSolution, row: int) -> float:
    """Sensitivity of the optimal value to the right-hand side of ``row``."""
    if sol.status is not Status.OPTIMAL:
        raise ContractViolation(f"duals are undefined for status {sol.status.value}")
    return float(sol.duals[row])


def duality_gap(lp: LinearProgram, sol: LpSolution) -> float:
    """|primal objective - dual objective| for an optimal solution.

    The dual objective is ``b y + sum_j d_j * bound_j`` where each reduced
    cost is charged against the bound it pushes on.
    """
    y, d = sol.duals, lp.c - lp.A.T @ sol.duals
    tol = DUAL_TOL * (1.0 + np.abs(lp.c))
    bound_term = 0.0
    for j in range(d.size):
        if d[j] > tol[j]:
            bound_term += d[j] * lp.lb[j] if np.isfinite(lp.lb[j]) else np.inf
        elif d[j] < -tol[j]:
            bound_term += d[j] * lp.ub[j] if np.isfinite(lp.ub[j]) else np.inf
    return abs(sol.objective - (float(lp.b @ y) + bound_term))


class SimplexSolver:
    """Bounded-variable revised simplex.

    Every row gets a slack column so ``A x + s = b`` with sense-dependent
    slack bounds; rows whose slack cannot start feasible get an artificial
    column for phase one.  The basis inverse is kept dense and updated by
    rank-one pivots, refactorised every ``refactor`` iterations.  Pricing is
    Dantzig's rule; after ``cycle_window`` iterations without objective
    progress it switches to Bland's rule until progress resumes.
    """

    name = "simplex"

    def __init__(self, max_iter: int | None = None, refactor: int = 64, cycle_window: int = 50):
        self.max_iter = max_iter
        self.refactor = refactor
        self.cycle_window = cycle_window

    def solve(self, lp: LinearProgram, warm_start: Basis | None = None) -> LpSolution:
        return _SimplexRun(lp, self).run(warm_start)


class _SimplexRun:
    def __init__(self, lp: LinearProgram, opts: SimplexSolver):
        self.lp = lp
        m, n = lp.shape
        self.m, self.n = m, n
        self.opts = opts
        self.max_iter = opts.max_iter if opts.max_iter is not None else 10 * (m + n) ** 2 + 100
        slack_lb = np.where(lp.senses == GE, -np.inf, 0.0)
        slack_ub = np.where(lp.senses == LE, np.inf, 0.0)
        self.lb = np.concatenate([lp.lb, slack_lb])
        self.ub = np.concatenate([lp.ub, slack_ub])
        self.cols = sp.hstack([lp.A, sp.identity(m, format="csr")], format="csc")
        self.iterations = 0

    # ----------------------------------------------------------------- setup
    def _nonbasic_value(self, j: int, upper: bool) -> float:
        lo, hi = self.lb[j], self.ub[j]
        if upper and np.isfinite(hi):
            return hi
        if np.isfinite(lo):
            return lo
        if np.isfinite(hi):
            return hi
        return 0.0

    def _cold_start(self):
        m, n = self.m, self.n
        x = np.array([self._nonbasic_value(j, False) for j in range(n + m)])
        r = self.lp.b - self.lp.A @ x[:n]
        s = np.clip(r, self.lb[n:], self.ub[n:])
        gap = r - s
        need = np.flatnonzero(np.abs(gap) > PRIMAL_TOL * (1.0 + np.abs(r)))
        x[n:] = r
        basic = n + np.arange(m)
        diag = np.ones(m)
        self.n_art = need.size
        if need.size:
            sign = np.sign(gap[need])
            art = sp.csc_matrix((sign, (need, np.arange(need.size))), shape=(m, need.size))
            self.cols = sp.hstack([self.cols, art], format="csc")
            self.lb = np.concatenate([self.lb, np.zeros(need.size)])
            self.ub = np.concatenate([self.ub, np.full(need.size, np.inf)])
            x[n + need] = s[need]
            x = np.concatenate([x, np.abs(gap[need])])
            basic[need] = n + m + np.arange(need.size)
            diag[need] = sign
        self.x = x
        self.basic = basic
        self.binv = np.diag(1.0 / diag)

    def _try_warm(self, ws: Basis) -> bool:
        m, n = self.m, self.n
        basic = np.asarray(ws.basic, dtype=int)
        if basic.size != m or len(set(basic.tolist())) != m or basic.min(initial=0) < 0 or basic.max(initial=0) >= n + m:
            return False
        try:
            binv = np.linalg.inv(self.cols[:, basic].toarray())
        except np.linalg.LinAlgError:
            return False
        if not np.isfinite(binv).all() or np.abs(binv).max() > 1e12:
            return False
        x = np.array([self._nonbasic_value(j, bool(ws.at_upper[j])) for j in range(n + m)])
        self.basic, self.binv, self.x, self.n_art = basic, binv, x, 0
        self._recompute_basic()
        xb = self.x[basic]
        if (xb < self.lb[basic] - PRIMAL_TOL * (1 + np.abs(xb))).any() or (xb > self.ub[basic] + PRIMAL_TOL * (1 + np.abs(xb))).any():
            return False
        return True

    # ------------------------------------------------------------ machinery
    def _recompute_basic(self):
        nb = np.ones(self.x.size, dtype=bool)
        nb[self.basic] = False
        rhs = self.lp.b - self.cols[:, nb] @ self.x[nb]
        self.x[self.basic] = self.binv @ rhs

    def _refactor(self):
        B = self.cols[:, self.basic].toarray()
        self.binv = np.linalg.inv(B)
        self._recompute_basic()

    def _iterate(self, cost: np.ndarray) -> Status:
        total = self.x.size
        is_basic = np.zeros(total, dtype=bool)
        is_basic[self.basic] = True
        best_obj = cost @ self.x
        stall = 0
        bland = False
        since_refactor = 0
        while True:
            if self.iterations >= self.max_iter:
                return Status.ITER_LIMIT
            if since_refactor >= self.opts.refactor:
                self._refactor()
                since_refactor = 0
            y = cost[self.basic] @ self.binv
            d = cost - self.cols.T @ y
            at_lo = np.isfinite(self.lb) & (self.x <= self.lb + PRIMAL_TOL)
            at_hi = np.isfinite(self.ub) & (self.x >= self.ub - PRIMAL_TOL)
            fixed = self.ub - self.lb <= 0.0
            eligible = ~is_basic & ~fixed & (
                ((d < -DUAL_TOL) & ~at_hi) | ((d > DUAL_TOL) & ~at_lo)
            )
            cand = np.flatnonzero(eligible)
            if cand.size == 0:
                return Status.OPTIMAL
            q = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            direction = 1.0 if d[q] < 0 else -1.0
            w = self.binv @ self.cols[:, q].toarray().ravel()
            delta = -direction * w
            xb = self.x[self.basic]
            lbb, ubb = self.lb[self.basic], self.ub[self.basic]
            ratios = np.full(self.m, np.inf)
            dec = delta < -PIVOT_TOL
            inc = delta > PIVOT_TOL
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios[dec] = (xb[dec] - lbb[dec]) / -delta[dec]
                ratios[inc] = (ubb[inc] - xb[inc]) / delta[inc]
            ratios = np.maximum(ratios, 0.0)
            t_flip = self.ub[q] - self.lb[q]
            t_min = ratios.min(initial=np.inf)
            if not np.isfinite(t_min) and not np.isfinite(t_flip):
                return Status.UNBOUNDED
            self.iterations += 1
            since_refactor += 1
            if t_flip <= t_min:
                self.x[q] += direction * t_flip
                self.x[self.basic] += delta * t_flip
            else:
                ties = np.flatnonzero(ratios <= t_min + 1e-12)
                if bland:
                    r = int(ties[np.argmin(self.basic[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                t = ratios[r]
                leave = self.basic[r]
                self.x[q] += direction * t
                self.x[self.basic] += delta * t
                self.x[leave] = self.lb[leave] if delta[r] < 0 else self.ub[leave]
                piv = w[r]
                row = self.binv[r] / piv
                self.binv -= np.outer(w, row)
                self.binv[r] = row
                self.basic[r] = q
                is_basic[leave] = False
                is_basic[q] = True
            obj = cost @ self.x
            if obj < best_obj - 1e-12 * (1.0 + abs(best_obj)):
                best_obj = obj
                stall = 0
                bland = False
            else:
                stall += 1
                if stall >= self.opts.cycle_window:
                    bland = True

    def run(self, warm_start: Basis | None) -> LpSolution:
        m, n = self.m, self.n
        if not (warm_start is not None and self._try_warm(warm_start)):
            self._cold_start()
            if self.n_art:
                cost1 = np.zeros(self.x.size)
                cost1[n + m:] = 1.0
                status = self._iterate(cost1)
                self._refactor()
                if status is Status.ITER_LIMIT:
                    return LpSolution(Status.ITER_LIMIT, iterations=self.iterations)
                infeas = float(self.x[n + m:].sum())
                if infeas > PRIMAL_TOL * (1.0 + np.abs(self.lp.b).max(initial=0.0)):
                    return LpSolution(Status.INFEASIBLE, iterations=self.iterations)
                self.ub[n + m:] = 0.0
                self.x[n + m:] = 0.0
                self._drive_out_artificials()
        cost = np.zeros(self.x.size)
        cost[:n] = self.lp.c
        status = self._iterate(cost)
        if status is not Status.OPTIMAL:
            return LpSolution(status, iterations=self.iterations)
        self._refactor()
        x = self.x[:n].copy()
        x = np.clip(x, self.lp.lb, self.lp.ub)
        y = cost[self.basic] @ self.binv
        d = self.lp.c - self.lp.A.T @ y
        at_upper = np.zeros(n + m, dtype=bool)
        at_upper[: n + m] = np.isfinite(self.ub[: n + m]) & (self.x[: n + m] >= self.ub[: n + m] - PRIMAL_TOL) & (self.ub[: n + m] > self.lb[: n + m])
        basis = None
        if (self.basic < n + m).all():
            basis = Basis(self.basic.copy(), at_upper)
        return LpSolution(Status.OPTIMAL, x=x, objective=float(self.lp.c @ x), duals=y,
                          reduced_costs=d, basis=basis, iterations=self.iterations)

    def _drive_out_artificials(self):
        """Pivot zero-valued artificials out of the basis where a structural or slack column allows."""
        n, m = self.n, self.m
        for r in np.flatnonzero(self.basic >= n + m):
            row = self.binv[r] @ self.cols[:, : n + m]
            row = np.asarray(row).ravel()
            row[self.basic[self.basic < n + m]] = 0.0
            cand = np.flatnonzero(np.abs(row) > 1e-7)
            if cand.size == 0:
                continue
            q = int(cand[np.argmax(np.abs(row[cand]))])
            w = self.binv @ self.cols[:, q].toarray().ravel()
            piv = w[r]
            new_row = self.binv[r] / piv
            self.binv -= np.outer(w, new_row)
            self.binv[r] = new_row
            self.basic[r] = q
        self._refactor()


def _row_bounds(senses, b):
    lo = np.where(senses == LE, -np.inf, b)
    hi = np.where(senses == GE, np.inf, b)
    return lo, hi


def _highs_status(h):
    import highspy

    st = h.getModelStatus()
    M = highspy.HighsModelStatus
    if st == M.kOptimal:
        return Status.OPTIMAL
    if st == M.kInfeasible:
        return Status.INFEASIBLE
    if st in (M.kUnbounded, M.kUnboundedOrInfeasible):
        return Status.UNBOUNDED
    return Status.ITER_LIMIT


class PersistentHighs:
    """One HiGHS model kept alive across solves.

    Rows can be appended or deleted and right-hand sides changed; each
    solve restarts from the previous optimal basis.
    """

    def __init__(self, lp: LinearProgram, threads: int = 1):
        import highspy

        self._h = h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("threads", int(threads))
        h.setOptionValue("random_seed", 0)
        model = highspy.HighsLp()
        m, n = lp.shape
        model.num_col_, model.num_row_ = n, m
        model.col_cost_ = np.asarray(lp.c, dtype=float)
        model.col_lower_ = np.asarray(lp.lb, dtype=float)
        model.col_upper_ = np.asarray(lp.ub, dtype=float)
        lo, hi = _row_bounds(lp.senses, lp.b)
        model.row_lower_, model.row_upper_ = lo, hi
        A = lp.A.tocsr()
        model.a_matrix_.format_ = highspy.MatrixFormat.kRowwise
        model.a_matrix_.num_col_, model.a_matrix_.num_row_ = n, m
        model.a_matrix_.start_ = A.indptr.astype(np.int32)
        model.a_matrix_.index_ = A.indices.astype(np.int32)
        model.a_matrix_.value_ = A.data.astype(float)
        h.passModel(model)
        self.c = np.asarray(lp.c, dtype=float)
        self.senses = np.asarray(lp.senses)
        self.n_rows = m

    def set_rhs(self, rows, senses, b) -> None:
        rows = np.asarray(rows, dtype=np.int32)
        lo, hi = _row_bounds(np.asarray(senses), np.asarray(b, dtype=float))
        self._h.changeRowsBounds(rows.size, rows, lo, hi)

    def add_rows(self, A, senses, b) -> None:
        A = sp.csr_matrix(A)
        lo, hi = _row_bounds(np.asarray(senses), np.asarray(b, dtype=float))
        self._h.addRows(A.shape[0], lo, hi, A.nnz, A.indptr[:-1].astype(np.int32),
                        A.indices.astype(np.int32), A.data.astype(float))
        self.senses = np.concatenate([self.senses, senses])
        self.n_rows += A.shape[0]

    def delete_rows(self, rows) -> None:
        rows = np.sort(np.asarray(rows, dtype=np.int32))
        self._h.deleteRows(rows.size, rows)
        keep = np.ones(self.n_rows, dtype=bool)
        keep[rows] = False
        self.senses = self.senses[keep]
        self.n_rows = int(keep.sum())

    def solve(self) -> LpSolution:
        h = self._h
        h.run()
        status = _highs_status(h)
        iters = int(h.getInfo().simplex_iteration_count)
        if status is not Status.OPTIMAL:
            return LpSolution(status, iterations=iters)
        sol = h.getSolution()
        x = np.asarray(sol.col_value, dtype=float)
        y = np.asarray(sol.row_dual, dtype=float)
        return LpSolution(Status.OPTIMAL, x=x, objective=float(self.c @ x), duals=y,
                          reduced_costs=np.asarray(sol.col_dual, dtype=float), iterations=iters)


class HighsSolver:
    """The HiGHS simplex through its Python bindings."""

    name = "highs"
    persistent = True

    def __init__(self, threads: int = 1):
        self.threads = threads

    def solve(self, lp: LinearProgram, warm_start: Basis | None = None) -> LpSolution:
        return PersistentHighs(lp, self.threads).solve()

    def model(self, lp: LinearProgram) -> PersistentHighs:
        return PersistentHighs(lp, self.threads)


_SOLVERS = {"simplex": SimplexSolver, "highs": HighsSolver}


def get_solver(name: str | None = None, threads: int = 1):
    """Solver by name; ``None`` reads ``MSIMRT_LP_BACKEND`` and defaults to the bundled simplex.

    ``threads`` only affects HiGHS; the bundled simplex is single-threaded.
    """
    name = name or os.environ.get("MSIMRT_LP_BACKEND", "simplex")
    if name not in _SOLVERS:
        raise ValueError(f"unknown LP backend {name!r}; choose from {sorted(_SOLVERS)}")
    return HighsSolver(threads) if name == "highs" else _SOLVERS[name]()


def solve(lp: LinearProgram, warm_start: Basis | None = None, backend: str | None = None) -> LpSolution:
    return get_solver(backend).solve(lp, warm_start)


# ------------------------------------------------------------------ MPS I/O
def write_mps(lp: LinearProgram, path, name: str = "LP") -> None:
    """Write free-format MPS; rows are R0.., columns C0..."""
    m, n = lp.shape
    kind = {LE: "L", EQ: "E", GE: "G"}
    A = lp.A.tocsc()
    lines = [f"NAME {name}", "ROWS", " N OBJ"]
    lines += [f" {kind[s]} R{i}" for i, s in enumerate(lp.senses)]
    lines.append("COLUMNS")
    for j in range(n):
        if lp.c[j] != 0.0:
            lines.append(f" C{j} OBJ {lp.c[j]:.17g}")
        for k in range(A.indptr[j], A.indptr[j + 1]):
            lines.append(f" C{j} R{A.indices[k]} {A.data[k]:.17g}")
        if lp.c[j] == 0.0 and A.indptr[j] == A.indptr[j + 1]:
            lines.append(f" C{j} OBJ 0.0")
    lines.append("RHS")
    lines += [f" RHS R{i} {v:.17g}" for i, v in enumerate(lp.b) if v != 0.0]
    lines.append("BOUNDS")
    for j in range(n):
        lo, hi = lp.lb[j], lp.ub[j]
        if lo == hi:
            lines.append(f" FX BND C{j} {lo:.17g}")
            continue
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f" FR BND C{j}")
            continue
        if np.isinf(lo):
            lines.append(f" MI BND C{j}")
        elif lo != 0.0:
            lines.append(f" LO BND C{j} {lo:.17g}")
        if np.isfinite(hi):
            lines.append(f" UP BND C{j} {hi:.17g}")
    lines.append("ENDATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mps(path) -> LinearProgram:
    """Read free-format MPS (sections ROWS, COLUMNS, RHS, BOUNDS)."""
    section = None
    obj_row = None
    rows: dict[str, int] = {}
    senses: list[str] = []
    cols: dict[str, int] = {}
    entries: list[tuple[int, int, float]] = []
    cost: dict[int, float] = {}
    rhs: dict[int, float] = {}
    bounds: dict[int, list[float]] = {}
    kind = {"L": LE, "E": EQ, "G": GE}

    def col(name):
        if name not in cols:
            cols[name] = len(cols)
        return cols[name]

    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("*"):
                continue
            tok = line.split()
            if not raw[0].isspace():
                section = tok[0]
                continue
            if section == "ROWS":
                if tok[0] == "N":
                    obj_row = obj_row or tok[1]
                else:
                    rows[tok[1]] = len(senses)
                    senses.append(kind[tok[0]])
            elif section == "COLUMNS":
                j = col(tok[0])
                for rname, val in zip(tok[1::2], tok[2::2]):
                    if rname == obj_row:
                        cost[j] = float(val)
                    else:
                        entries.append((rows[rname], j, float(val)))
            elif section == "RHS":
                pairs = tok[1:] if len(tok) % 2 == 1 else tok
                for rname, val in zip(pairs[::2], pairs[1::2]):
                    if rname in rows:
                        rhs[rows[rname]] = float(val)
            elif section == "BOUNDS":
                typ, cname = tok[0], tok[2]
                j = col(cname)
                bnd = bounds.setdefault(j, [0.0, np.inf])
                val = float(tok[3]) if len(tok) > 3 else None
                if typ == "LO":
                    bnd[0] = val
                elif typ == "UP":
                    bnd[1] = val
                elif typ == "FX":
                    bnd[0] = bnd[1] = val
                elif typ == "FR":
                    bnd[0], bnd[1] = -np.inf, np.inf
                elif typ == "MI":
                    bnd[0] = -np.inf
                elif typ == "PL":
                    bnd[1] = np.inf
    m, n = len(senses), len(cols)
    r, cidx, v = zip(*entries) if entries else ((), (), ())
    A = sp.csr_matrix((v, (r, cidx)), shape=(m, n))
    c = np.array([cost.get(j, 0.0) for j in range(n)])
    b = np.array([rhs.get(i, 0.0) for i in range(m)])
    lb = np.array([bounds.get(j, [0.0, np.inf])[0] for j in range(n)])
    ub = np.array([bounds.get(j, [0.0, np.inf])[1] for j in range(n)])
    return LinearProgram(c, A, np.array(senses), b, lb, ub)

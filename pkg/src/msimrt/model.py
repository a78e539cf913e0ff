"""Stage linear programs for fractionated fluence planning.

A fraction is a decision-hazard node: the beamlet intensities ``x`` are fixed
before the patient position is revealed, and every realisation ``p`` then
produces its own dose ``z_p = D_p x``, its own per-fraction penalties and
its own next state ``I + D_p x``.  The node objective applies the risk
measure to the per-realisation totals

    Z_p = sum_i w+_i th+_pi + w-_i th-_pi + [a+_i ga+_pi + a-_i ga-_pi]  + phi_p

where the bracket only appears in the last fraction and ``phi_p`` bounds
the cost-to-go of the next fraction from below through the current cuts.

The state ``I`` (cumulative dose on the retained voxels) enters only the
right-hand sides.  Each row stores its state coefficients in ``G`` so that
``b(I) = b0 + G I`` and the subgradient of the node value with respect to
``I`` is ``G^T y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import riskmeasure as rmod
from .lp import GE, EQ, LinearProgram, LpSolution, Status
from .phantom import BeamletLayout, KernelParams, TissueSet, VoxelGrid, dose_influence
from .riskmeasure import RiskMeasure
from .scenario import ScenarioSet


class InvalidSampleError(ValueError):
    pass


class ModelError(RuntimeError):
    """A stage LP that should always be solvable was not."""


@dataclass
class VoxelSample:
    retained: dict[str, np.ndarray]  # positions into each tissue's voxel array
    rate: float
    seed: int | None

    def count(self, name: str) -> int:
        return int(self.retained[name].size)


def sample_voxels(tissues: TissueSet, rate: float, seed: int | None = None) -> VoxelSample:
    """Keep ``ceil(rate * |V_l|)`` voxels of every tissue, uniformly without replacement."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    retained = {}
    for t in tissues:
        n = t.voxels.size
        if rate == 1.0:
            retained[t.name] = np.arange(n)
            continue
        k = min(n, math.ceil(rate * n - 1e-12))
        retained[t.name] = np.sort(rng.choice(n, size=k, replace=False)) if n else np.arange(0)
    return VoxelSample(retained, rate, seed)


def full_sample(tissues: TissueSet) -> VoxelSample:
    return sample_voxels(tissues, 1.0)


@dataclass
class PlanningData:
    """Per-voxel coefficients and realised dose matrices on the retained voxels."""

    F: int
    probabilities: np.ndarray
    doses: list[np.ndarray]  # one (n_v, n_b) matrix per realisation
    voxels: np.ndarray
    tissue_of: np.ndarray
    names: list[str]
    tumor: np.ndarray
    r_plus: np.ndarray
    r_minus: np.ndarray
    t_plus: np.ndarray
    t_minus: np.ndarray
    w_over: np.ndarray
    w_under: np.ndarray
    a_over: np.ndarray
    a_under: np.ndarray

    @property
    def P(self) -> int:
        return len(self.doses)

    @property
    def n_voxels(self) -> int:
        return self.voxels.size

    @property
    def n_beamlets(self) -> int:
        return self.doses[0].shape[1]

    @classmethod
    def from_arrays(cls, doses, probabilities, F: int, tumor, t_min, t_max,
                    beta_over=1.0, beta_under=1.0, alpha_over=10.0, alpha_under=10.0) -> "PlanningData":
        """Planning data from explicit matrices; every voxel weighs ``1/n_v`` like a single tissue."""
        doses = [np.atleast_2d(np.asarray(D, dtype=float)) for D in doses]
        nv = doses[0].shape[0]
        tumor = np.asarray(tumor, dtype=bool)
        if not tumor.any():
            raise InvalidSampleError("at least one tumour voxel is required")
        full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (nv,)).copy()
        t_min, t_max = full(t_min) * tumor, full(t_max)
        n = float(nv)
        return cls(F, np.asarray(probabilities, dtype=float), doses, np.arange(nv), np.zeros(nv, dtype=int), ["all"],
                   tumor, t_max / F, t_min / F, t_max, t_min, full(beta_over) / n, full(beta_under) / n * tumor,
                   full(alpha_over) / n, full(alpha_under) / n * tumor)

    def stage_costs(self, x, state, f: int) -> np.ndarray:
        """Per-realisation penalty of fraction ``f`` (1-based) at intensities ``x`` and entering state."""
        out = np.empty(self.P)
        for p, D in enumerate(self.doses):
            z = D @ x
            out[p] = self.realized_cost(z, np.asarray(state) + z, f)
        return out

    def realized_cost(self, z, next_state, f: int) -> float:
        tum = self.tumor
        cost = self.w_over @ np.maximum(z - self.r_plus, 0.0)
        cost += self.w_under[tum] @ np.maximum(self.r_minus[tum] - z[tum], 0.0)
        if f == self.F:
            cost += self.a_over @ np.maximum(next_state - self.t_plus, 0.0)
            cost += self.a_under[tum] @ np.maximum(self.t_minus[tum] - next_state[tum], 0.0)
        return float(cost)


def planning_data(grid: VoxelGrid, tissues: TissueSet, beamlets: BeamletLayout, kernel: KernelParams,
                  scen: ScenarioSet, F: int, sample: VoxelSample | None = None) -> PlanningData:
    if F < 1:
        raise ValueError("need at least one fraction")
    sample = sample or full_sample(tissues)
    vox, tid, parts = [], [], []
    names = tissues.names
    for k, t in enumerate(tissues):
        keep = sample.retained[t.name]
        vox.append(t.voxels[keep])
        tid.append(np.full(keep.size, k))
        parts.append((t, keep.size))
    voxels = np.concatenate(vox)
    tissue_of = np.concatenate(tid)
    if not any(t.is_tumor and n > 0 for t, n in parts):
        raise InvalidSampleError("no tumour voxel survived sampling")
    coef = {key: np.zeros(voxels.size) for key in
            ("r_plus", "r_minus", "t_plus", "t_minus", "w_over", "w_under", "a_over", "a_under")}
    tumor = np.zeros(voxels.size, dtype=bool)
    for k, (t, n) in enumerate(parts):
        sel = tissue_of == k
        if n == 0:
            continue
        r_minus, r_plus = t.fraction_limits(F)
        coef["r_plus"][sel] = r_plus
        coef["t_plus"][sel] = t.t_max
        coef["w_over"][sel] = t.beta_over / n
        coef["a_over"][sel] = t.alpha_over / n
        if t.is_tumor:
            tumor[sel] = True
            coef["r_minus"][sel] = r_minus
            coef["t_minus"][sel] = t.t_min
            coef["w_under"][sel] = t.beta_under / n
            coef["a_under"][sel] = t.alpha_under / n
    nominal = dose_influence(grid, voxels, beamlets, kernel)
    doses = scen.realize(nominal)
    return PlanningData(F, scen.probabilities.copy(), doses, voxels, tissue_of, names, tumor, **coef)


@dataclass
class Cut:
    """``V(I) >= intercept + gradient @ I`` for the value of the fraction after ``stage``."""

    stage: int
    intercept: float
    gradient: np.ndarray
    iteration: int = 0
    _xcoef: np.ndarray | None = field(default=None, repr=False, compare=False)

    def value(self, state) -> float:
        return float(self.intercept + self.gradient @ np.asarray(state))


@dataclass
class StageSolution:
    value: float
    x: np.ndarray
    totals: np.ndarray  # Z_p including the cost-to-go epigraph
    costs: np.ndarray  # stage penalties only
    gradient: np.ndarray
    mu: np.ndarray
    lp: LpSolution


class StageProblem:
    """LP template for fraction ``f`` (1-based) of ``F``.

    With ``explicit_nonanticipativity`` every realisation gets its own copy
    ``x_p`` of the intensities tied to a shared ``x*`` by equality rows; the
    default substitutes ``x_p = x*`` directly.  Both give the same value.
    """

    def __init__(self, data: PlanningData, f: int, rm: RiskMeasure = rmod.EXPECTATION,
                 explicit_nonanticipativity: bool = False):
        if not 1 <= f <= data.F:
            raise ValueError(f"fraction index {f} outside 1..{data.F}")
        self.data, self.f, self.rm = data, f, rm
        self.explicit = explicit_nonanticipativity
        self.last = f == data.F
        self._build()

    # ------------------------------------------------------------ template
    def _build(self):
        d = self.data
        nv, nb, P = d.n_voxels, d.n_beamlets, d.P
        tum = np.flatnonzero(d.tumor)
        nt = tum.size
        col = 0
        self.x_cols = np.arange(nb)
        col = nb
        self.xp_cols = []
        if self.explicit:
            for _ in range(P):
                self.xp_cols.append(np.arange(col, col + nb))
                col += nb
        else:
            self.xp_cols = [self.x_cols] * P
        self.th_plus, self.th_minus, self.ga_plus, self.ga_minus, self.phi = [], [], [], [], []
        for _ in range(P):
            self.th_plus.append(np.arange(col, col + nv)); col += nv
            self.th_minus.append(np.arange(col, col + nt)); col += nt
            if self.last:
                self.ga_plus.append(np.arange(col, col + nv)); col += nv
                self.ga_minus.append(np.arange(col, col + nt)); col += nt
            else:
                self.phi.append(col); col += 1
        # Z_p as sparse coefficient rows
        zr, zc, zv = [], [], []
        for p in range(P):
            parts = [(self.th_plus[p], d.w_over), (self.th_minus[p], d.w_under[tum])]
            if self.last:
                parts += [(self.ga_plus[p], d.a_over), (self.ga_minus[p], d.a_under[tum])]
            else:
                parts += [(np.array([self.phi[p]]), np.ones(1))]
            for cols, vals in parts:
                zr.append(np.full(cols.size, p)); zc.append(cols); zv.append(vals)
        n_core = col
        terms = self.rm.terms()
        q = d.probabilities
        self.risk_terms = []
        extra = 0
        for w, kind, alpha in terms:
            if kind == rmod.E:
                self.risk_terms.append((w, kind, None, None))
            elif kind == rmod.WORST:
                t_col = n_core + extra; extra += 1
                self.risk_terms.append((w, kind, t_col, None))
            else:
                zeta = n_core + extra; extra += 1
                u = np.arange(n_core + extra, n_core + extra + P); extra += P
                self.risk_terms.append((w, kind, zeta, u, alpha))
        self.n_cols = n_core + extra
        c = np.zeros(self.n_cols)
        lbv = np.zeros(self.n_cols)
        Zmat = sp.csr_matrix((np.concatenate(zv), (np.concatenate(zr), np.concatenate(zc))),
                             shape=(P, self.n_cols))
        self.Z = Zmat
        rows, senses, rhs = [], [], []
        G_rows = []  # state coefficients of each row, sparse (rows x nv)

        def add(block, sense, b, G=None):
            rows.append(sp.csr_matrix(block))
            senses.append(np.full(block.shape[0], sense))
            rhs.append(np.asarray(b, dtype=float))
            G_rows.append(sp.csr_matrix(G) if G is not None else sp.csr_matrix((block.shape[0], nv)))

        for p in range(P):
            D = d.doses[p]
            xp = self.xp_cols[p]
            # th+ - D x_p >= -R+
            add(_block(self.n_cols, [(np.arange(nv), self.th_plus[p], 1.0)], [(xp, -D)], nv), GE, -d.r_plus)
            # th- + D x_p >= R-   (tumour voxels)
            add(_block(self.n_cols, [(np.arange(nt), self.th_minus[p], 1.0)], [(xp, D[tum])], nt), GE, d.r_minus[tum])
            if self.last:
                # ga+ - D x* >= I - T+
                add(_block(self.n_cols, [(np.arange(nv), self.ga_plus[p], 1.0)], [(self.x_cols, -D)], nv),
                    GE, -d.t_plus, sp.identity(nv))
                # ga- + D x* >= T- - I
                add(_block(self.n_cols, [(np.arange(nt), self.ga_minus[p], 1.0)], [(self.x_cols, D[tum])], nt),
                    GE, d.t_minus[tum], -sp.identity(nv, format="csr")[tum])
        for term in self.risk_terms:
            w, kind = term[0], term[1]
            if kind == rmod.E:
                c += w * (q @ Zmat.toarray())
            elif kind == rmod.WORST:
                t_col = term[2]
                c[t_col] += w
                lbv[t_col] = -np.inf
                blk = sp.lil_matrix((P, self.n_cols))
                blk[:, t_col] = 1.0
                add(sp.csr_matrix(blk) - Zmat, GE, np.zeros(P))
            else:
                zeta, u, alpha = term[2], term[3], term[4]
                c[zeta] += w
                lbv[zeta] = -np.inf
                c[u] += w * q / (1.0 - alpha)
                blk = sp.lil_matrix((P, self.n_cols))
                blk[:, zeta] = 1.0
                for p in range(P):
                    blk[p, u[p]] = 1.0
                add(sp.csr_matrix(blk) - Zmat, GE, np.zeros(P))
        self.n_risk_rows = sum(P for t in self.risk_terms if t[1] != rmod.E)
        if self.explicit:
            for p in range(P):
                add(_block(self.n_cols, [], [(self.xp_cols[p], np.eye(nb)), (self.x_cols, -np.eye(nb))], nb),
                    EQ, np.zeros(nb))
        self.A0 = sp.vstack(rows, format="csr")
        self.senses0 = np.concatenate(senses)
        self.b0 = np.concatenate(rhs)
        self.G0 = sp.vstack(G_rows, format="csr")
        self.c = c
        self.lb = lbv
        self.ub = np.full(self.n_cols, np.inf)
        self._state_rows = np.flatnonzero(np.diff(self.G0.indptr))
        self._hp = None
        self._hp_solver = None
        self._hp_cuts: list[Cut] = []

    # ------------------------------------------------------------- solving
    def _cut_block(self, cuts: list[Cut]):
        d = self.data
        if self.last or not cuts:
            return None
        P, K = d.P, len(cuts)
        coefs = []
        for cut in cuts:
            if cut._xcoef is None:
                cut._xcoef = np.stack([cut.gradient @ D for D in d.doses])
            coefs.append(cut._xcoef)
        xc = np.stack(coefs)  # (K, P, nb)
        nb = d.n_beamlets
        # rows ordered (k, p): phi_p - (g_k D_p) x* >= a_k + g_k I
        r = np.repeat(np.arange(K * P), nb + 1)
        cols = np.empty((K, P, nb + 1), dtype=np.int64)
        vals = np.empty((K, P, nb + 1))
        cols[:, :, :nb] = self.x_cols
        vals[:, :, :nb] = -xc
        cols[:, :, nb] = np.asarray(self.phi)[None, :]
        vals[:, :, nb] = 1.0
        A = sp.csr_matrix((vals.ravel(), (r, cols.ravel())), shape=(K * P, self.n_cols))
        b = np.repeat([cut.intercept for cut in cuts], P)
        G = np.repeat(np.stack([cut.gradient for cut in cuts]), P, axis=0)
        return A, b, G

    def lp(self, state, cuts: list[Cut] | None = None) -> tuple[LinearProgram, np.ndarray]:
        """The instantiated LP and its state-coefficient matrix."""
        state = np.asarray(state, dtype=float)
        A, senses, b, G = self.A0, self.senses0, self.b0 + self.G0 @ state, self.G0
        blk = self._cut_block(cuts or [])
        if blk is not None:
            Ac, bc, Gc = blk
            A = sp.vstack([A, Ac], format="csr")
            senses = np.concatenate([senses, np.full(bc.size, GE)])
            b = np.concatenate([b, bc + Gc @ state])
            G = sp.vstack([G, sp.csr_matrix(Gc)], format="csr")
        return LinearProgram(self.c, A, senses, b, self.lb, self.ub), G

    def solve(self, state, cuts: list[Cut] | None, solver) -> StageSolution:
        state = np.asarray(state, dtype=float)
        cuts = [] if self.last or cuts is None else cuts
        if getattr(solver, "persistent", False):
            sol = self._solve_persistent(state, cuts, solver)
        else:
            lp, _ = self.lp(state, cuts)
            sol = solver.solve(lp)
        if sol.status is not Status.OPTIMAL:
            raise ModelError(f"fraction {self.f} LP returned {sol.status.value}")
        x = sol.x[self.x_cols]
        totals = self.Z @ sol.x
        costs = totals.copy()
        if not self.last:
            costs -= sol.x[np.asarray(self.phi)]
        m0 = self.A0.shape[0]
        gradient = self.G0.T @ sol.duals[:m0]
        if cuts:
            y = sol.duals[m0:].reshape(len(cuts), self.data.P).sum(axis=1)
            gradient = gradient + y @ np.stack([c.gradient for c in cuts])
        return StageSolution(sol.objective, x, totals, costs, np.asarray(gradient).ravel(),
                             self.mu_from_duals(sol), sol)

    def _solve_persistent(self, state, cuts: list[Cut], solver) -> LpSolution:
        """Re-solve a long-lived solver model: append new cut rows, move the state rows."""
        loaded = self._hp_cuts
        stale = (self._hp is None or self._hp_solver is not solver or len(cuts) < len(loaded)
                 or any(a is not b for a, b in zip(loaded, cuts)))
        if stale:
            self._hp = solver.model(LinearProgram(self.c, self.A0, self.senses0, self.b0, self.lb, self.ub))
            self._hp_solver = solver
            loaded = []
        hp = self._hp
        new = cuts[len(loaded):]
        if new:
            Ac, bc, Gc = self._cut_block(new)
            hp.add_rows(Ac, np.full(bc.size, GE), bc + Gc @ state)
        self._hp_cuts = list(cuts)
        rows = self._state_rows
        b = self.b0[rows] + self.G0[rows] @ state
        senses = self.senses0[rows]
        if cuts:
            m0, P = self.A0.shape[0], self.data.P
            icpt = np.array([c.intercept for c in cuts])
            grads = np.stack([c.gradient for c in cuts])
            rows = np.concatenate([rows, np.arange(m0, m0 + len(cuts) * P)])
            b = np.concatenate([b, np.repeat(icpt + grads @ state, P)])
            senses = np.concatenate([senses, np.full(len(cuts) * P, GE)])
        hp.set_rhs(rows, senses, b)
        return hp.solve()

    def mu_from_duals(self, sol: LpSolution) -> np.ndarray:
        """Risk-adjusted probabilities implied by the duals of the risk rows."""
        q = self.data.probabilities
        P = q.size
        mu = np.zeros(P)
        start = self._risk_row_start()
        for term in self.risk_terms:
            w, kind = term[0], term[1]
            if kind == rmod.E:
                mu += w * q
            else:
                mu += sol.duals[start:start + P]
                start += P
        return mu

    def _risk_row_start(self) -> int:
        d = self.data
        per_p = d.n_voxels + int(d.tumor.sum())
        if self.last:
            per_p *= 2
        return per_p * d.P


def _block(n_cols, unit_parts, dense_parts, n_rows):
    """Sparse block with unit entries (row_idx, col_idx, value) and dense (cols, matrix) pieces."""
    r, c, v = [], [], []
    for rows, cols, val in unit_parts:
        r.append(rows); c.append(cols); v.append(np.full(rows.size, val))
    for cols, M in dense_parts:
        M = np.asarray(M, dtype=float)
        if M.size == 0:
            continue
        rr, cc = np.nonzero(M)
        r.append(rr); c.append(np.asarray(cols)[cc]); v.append(M[rr, cc])
    if not r:
        return sp.csr_matrix((n_rows, n_cols))
    return sp.csr_matrix((np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n_rows, n_cols))


def build_stage(f: int, data: PlanningData, rm: RiskMeasure = rmod.EXPECTATION,
                explicit_nonanticipativity: bool = False) -> StageProblem:
    return StageProblem(data, f, rm, explicit_nonanticipativity)


def build_stages(data: PlanningData, rm: RiskMeasure = rmod.EXPECTATION) -> list[StageProblem]:
    return [StageProblem(data, f, rm) for f in range(1, data.F + 1)]


def build_deterministic(data: PlanningData) -> list[StageProblem]:
    """Stage problems of the nominal-geometry model (requires a single realisation)."""
    if data.P != 1:
        raise ValueError("the deterministic model uses the nominal geometry only (P = 1)")
    return build_stages(data, rmod.EXPECTATION)


@dataclass
class DeterministicPlan:
    x: np.ndarray  # (F, n_b)
    objective: float
    lp: LpSolution


def solve_deterministic(data: PlanningData, solver, symmetrize: bool = True) -> DeterministicPlan:
    """Solve the chained nominal model as one LP.

    Fractions are exchangeable (same weights and thresholds in every
    fraction), so the average of an optimal plan over fractions is again
    optimal; with ``symmetrize`` that uniform plan is returned.
    """
    if data.P != 1:
        raise ValueError("the deterministic model uses the nominal geometry only (P = 1)")
    F, D = data.F, data.doses[0]
    nv, nb = D.shape
    tum = np.flatnonzero(data.tumor)
    nt = tum.size
    # columns: x_f (F*nb) | th+_f (F*nv) | th-_f (F*nt) | ga+ (nv) | ga- (nt)
    x0, tp0 = 0, F * nb
    tm0 = tp0 + F * nv
    gp0 = tm0 + F * nt
    gm0 = gp0 + nv
    n = gm0 + nt
    c = np.zeros(n)
    c[tp0:tm0] = np.tile(data.w_over, F)
    c[tm0:gp0] = np.tile(data.w_under[tum], F)
    c[gp0:gm0] = data.a_over
    c[gm0:] = data.a_under[tum]
    blocks, b = [], []
    for f in range(F):
        xs = np.arange(x0 + f * nb, x0 + (f + 1) * nb)
        blocks.append(_block(n, [(np.arange(nv), np.arange(tp0 + f * nv, tp0 + (f + 1) * nv), 1.0)], [(xs, -D)], nv))
        b.append(-data.r_plus)
        blocks.append(_block(n, [(np.arange(nt), np.arange(tm0 + f * nt, tm0 + (f + 1) * nt), 1.0)], [(xs, D[tum])], nt))
        b.append(data.r_minus[tum])
    allx = np.arange(F * nb)
    blocks.append(_block(n, [(np.arange(nv), np.arange(gp0, gm0), 1.0)], [(allx, -np.tile(D, F))], nv))
    b.append(-data.t_plus)
    blocks.append(_block(n, [(np.arange(nt), np.arange(gm0, n), 1.0)], [(allx, np.tile(D[tum], F))], nt))
    b.append(data.t_minus[tum])
    A = sp.vstack(blocks, format="csr")
    rhs = np.concatenate(b)
    lp = LinearProgram(c, A, np.full(rhs.size, GE), rhs)
    sol = solver.solve(lp)
    if sol.status is not Status.OPTIMAL:
        raise ModelError(f"deterministic LP returned {sol.status.value}")
    x = sol.x[: F * nb].reshape(F, nb)
    if symmetrize:
        x = np.tile(x.mean(axis=0), (F, 1))
    return DeterministicPlan(x, float(sol.objective), sol)


def plan_cost(data: PlanningData, x_plan, path) -> np.ndarray:
    """Stage penalties of a fixed plan along a realisation path."""
    state = np.zeros(data.n_voxels)
    out = np.empty(data.F)
    for f in range(1, data.F + 1):
        z = data.doses[path[f - 1]] @ x_plan[f - 1]
        out[f - 1] = data.realized_cost(z, state + z, f)
        state = state + z
    return out

"""Policy roll-out along sampled realisation paths.

Each fraction decides ``x_f`` from the cumulative dose ``I_f`` on the
planning voxels *before* drawing the realisation, then applies it.  Doses
are tracked on two voxel sets: the planning voxels (which drive the policy
and the stage costs) and an evaluation bank at full resolution (which feeds
the metrics).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .artifacts import write_dose
from .model import PlanningData
from .phantom import BeamletLayout, KernelParams, TissueSet, VoxelGrid, dose_influence, healthy_zone
from .scenario import ScenarioSet, draw_path, draw_path_out_of_sample
from .sddp import PolicyStateError, StagePolicy

STREAM_SIMULATION = 21


@dataclass(frozen=True)
class EvalTissue:
    name: str
    kind: str  # tumor, oar or zone
    index: np.ndarray  # rows of the bank matrices
    t_min: float = 0.0
    t_max: float = np.inf


@dataclass
class EvaluationBank:
    """Full-resolution dose matrices of the evaluated structures, one per realisation."""

    voxels: np.ndarray
    tissues: list[EvalTissue]
    doses: list[np.ndarray]

    def __getitem__(self, name: str) -> EvalTissue:
        for t in self.tissues:
            if t.name == name:
                return t
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tissues]


def evaluation_bank(grid: VoxelGrid, tissues: TissueSet, ctv: np.ndarray, beamlets: BeamletLayout,
                    kernel: KernelParams, scen: ScenarioSet, zone_margin_mm: float = 50.0) -> EvaluationBank:
    """Bank over the CTV (standing in for the tumour), every OAR and the healthy zone.

    ``tissues`` provides prescriptions; the tumour entry is evaluated on
    ``ctv`` whatever margin was used for planning.
    """
    ctv = np.unique(np.asarray(ctv, dtype=np.int64))
    zone = healthy_zone(ctv, grid, zone_margin_mm)
    parts = [ctv]
    entries = []
    tumor = tissues.tumors[0]
    entries.append(("tumor", tumor.name, ctv, tumor.t_min, tumor.t_max))
    for t in tissues.oars:
        parts.append(t.voxels)
        entries.append(("oar", t.name, t.voxels, 0.0, t.t_max))
    parts.append(zone)
    entries.append(("zone", "HealthyZone", zone, 0.0, np.inf))
    voxels = np.unique(np.concatenate(parts))
    out = []
    for kind, name, vox, lo, hi in entries:
        out.append(EvalTissue(name, kind, np.searchsorted(voxels, vox), float(lo), float(hi)))
    nominal = dose_influence(grid, voxels, beamlets, kernel)
    return EvaluationBank(voxels, out, scen.realize(nominal))


@dataclass
class SimulationTrace:
    path: np.ndarray  # (F,) realisation indices, 0-based
    x: np.ndarray  # (F, n_b)
    z: np.ndarray  # (F, n_eval) delivered dose on the evaluation bank
    plan_z: np.ndarray  # (F, n_v) delivered dose on the planning voxels
    stage_costs: np.ndarray  # (F,)
    gamma_plus: np.ndarray  # end overshoot per planning voxel
    gamma_minus: np.ndarray  # end shortfall per planning voxel (0 off-tumour)

    @property
    def F(self) -> int:
        return len(self.path)

    @property
    def cumulative(self) -> np.ndarray:
        return self.z.sum(axis=0)

    @property
    def total_cost(self) -> float:
        return float(self.stage_costs.sum())


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_SIMULATION]))


def _paths(probabilities, F, n_runs, rng, scen: ScenarioSet | None, out_of_sample: bool):
    if out_of_sample:
        if scen is None:
            raise ValueError("out-of-sample simulation needs the scenario set")
        return [draw_path_out_of_sample(scen, F, rng) for _ in range(n_runs)]
    return [draw_path(probabilities, F, rng) for _ in range(n_runs)]


def _trace(data: PlanningData | None, bank: EvaluationBank | None, path, xs) -> SimulationTrace:
    F = len(path)
    n_eval = 0 if bank is None else bank.voxels.size
    z = np.zeros((F, n_eval))
    if data is not None:
        plan_z = np.stack([data.doses[p] @ x for p, x in zip(path, xs)])
        state = np.zeros(data.n_voxels)
        costs = np.empty(F)
        for f in range(F):
            costs[f] = data.realized_cost(plan_z[f], state + plan_z[f], f + 1)
            state = state + plan_z[f]
        gp = np.maximum(state - data.t_plus, 0.0)
        gm = np.where(data.tumor, np.maximum(data.t_minus - state, 0.0), 0.0)
    else:
        plan_z = np.zeros((F, 0))
        costs = np.full(F, np.nan)
        gp = gm = np.zeros(0)
    if bank is not None:
        for f, (p, x) in enumerate(zip(path, xs)):
            z[f] = bank.doses[p] @ x
    return SimulationTrace(np.asarray(path, dtype=np.int64), np.asarray(xs), z, plan_z, costs, gp, gm)


def simulate(policy: StagePolicy, n_runs: int, seed: int = 0, bank: EvaluationBank | None = None,
             out_of_sample: bool = False, scen: ScenarioSet | None = None) -> list[SimulationTrace]:
    """Roll the policy out ``n_runs`` times with the final cut sets."""
    if not policy.trained:
        raise PolicyStateError("policy has not been trained")
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    data = policy.data
    rng = _rng(seed)
    paths = _paths(data.probabilities, data.F, n_runs, rng, scen, out_of_sample)
    cache: dict[tuple, np.ndarray] = {}
    traces = []
    for path in paths:
        state = np.zeros(data.n_voxels)
        xs = []
        for f in range(1, data.F + 1):
            key = tuple(path[: f - 1])
            if key not in cache:
                cache[key] = policy.solve_node(f, state).x
            x = cache[key]
            xs.append(x)
            state = state + data.doses[path[f - 1]] @ x
        traces.append(_trace(data, bank, path, xs))
    return traces


def replay_deterministic(x_plan, probabilities, n_runs: int, seed: int = 0, bank: EvaluationBank | None = None,
                         cost_data: PlanningData | None = None, out_of_sample: bool = False,
                         scen: ScenarioSet | None = None) -> list[SimulationTrace]:
    """Apply a fixed per-fraction plan under sampled geometries.

    ``cost_data`` (planning voxels with one matrix per realisation) is only
    needed when stage costs should be reported.
    """
    x_plan = np.atleast_2d(np.asarray(x_plan, dtype=float))
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    q = np.asarray(probabilities, dtype=float)
    if cost_data is not None and cost_data.P != q.size:
        raise ValueError("cost data must carry one matrix per realisation")
    rng = _rng(seed)
    paths = _paths(q, len(x_plan), n_runs, rng, scen, out_of_sample)
    return [_trace(cost_data, bank, path, list(x_plan)) for path in paths]


def write_traces_csv(traces: list[SimulationTrace], path) -> None:
    """Row per (run, fraction): realisation, stage cost and the decision vector."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        nb = traces[0].x.shape[1] if traces else 0
        w.writerow(["run", "fraction", "realization", "stage_cost"] + [f"x{j}" for j in range(nb)])
        for r, t in enumerate(traces):
            for f in range(t.F):
                w.writerow([r, f + 1, int(t.path[f]), repr(float(t.stage_costs[f]))]
                           + [repr(float(v)) for v in t.x[f]])


def write_trace_doses(traces: list[SimulationTrace], bank: EvaluationBank, path) -> np.ndarray:
    """Dose binary with one row per (run, fraction), in ``write_traces_csv`` row order.

    Columns are the bank rows of the tumour and OAR structures (the healthy
    zone is left out to keep the file small); returns those row indices.
    """
    cols = np.unique(np.concatenate([t.index for t in bank.tissues if t.kind != "zone"]))
    rows = [t.z[f, cols] for t in traces for f in range(t.F)]
    write_dose(path, np.array(rows) if rows else np.zeros((0, cols.size)))
    return cols

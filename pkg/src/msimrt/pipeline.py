"""End-to-end runs: case generation, planning, simulation and evaluation.

All randomness derives from ``RunConfig.seed`` through fixed streams, so two
runs of the same configuration write identical reports.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import riskmeasure as rmod
from .artifacts import case_from_dict, case_to_dict, dump_yaml, load_yaml
from .evaluate import EvaluationReport, evaluate
from .lp import get_solver
from .model import PlanningData, planning_data, sample_voxels, solve_deterministic
from .phantom import CaseSpec, TissueSet, dilate, generate_case
from .scenario import ScenarioSet, nominal_only, sample_miga
from .sddp import StagePolicy, TrainOptions, TrainReport, train
from .simulate import EvaluationBank, SimulationTrace, evaluation_bank, replay_deterministic, simulate

STREAM_SCENARIO = 1
STREAM_VOXELS = 2
STREAM_SDDP = 3
STREAM_SIM = 4

TUMOR = "Tumor_0"


def derive_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(base), int(stream)]).generate_state(1)[0])


@dataclass
class RunConfig:
    case: CaseSpec = field(default_factory=CaseSpec)
    F: int = 5
    P: int = 20
    risk: str = "worst"
    voxel_rate: float = 0.3
    n_sim: int = 200
    seed: int = 0
    deterministic: bool = False
    margin_mm: float | None = None  # planning margin; None = CTV+ (stochastic) or PTV (deterministic)
    lp_backend: str = "highs"
    threads: int = 1
    out_of_sample: bool = False
    sddp: dict = field(default_factory=lambda: {"max_iters": 60, "window": 20, "epsilon": 1e-4})

    def __post_init__(self):
        if isinstance(self.case, dict):
            self.case = case_from_dict(self.case)
        if self.F < 1:
            raise ValueError("F must be >= 1")
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if not 0.0 < self.voxel_rate <= 1.0:
            raise ValueError("voxel_rate must lie in (0, 1]")
        if self.n_sim < 2:
            raise ValueError("n_sim must be >= 2")
        if self.margin_mm is not None and self.margin_mm < 0:
            raise ValueError("margin must be nonnegative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        rmod.parse(self.risk)
        TrainOptions(**self.sddp)

    @property
    def model_id(self) -> str:
        if self.deterministic:
            return f"det_m{self.planning_margin:g}"
        return f"stoch_{self.risk}_m{self.planning_margin:g}"

    @property
    def planning_margin(self) -> float:
        if self.margin_mm is not None:
            return float(self.margin_mm)
        return self.case.ptv_margin_mm if self.deterministic else self.case.ctv_plus_margin_mm

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["case"] = case_to_dict(self.case)
        d["sddp"] = dict(self.sddp)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        doc = load_yaml(path)
        if "case" not in doc and "volume_cm3" in doc:
            doc = {"case": doc}  # a bare case file
        return cls.from_dict(doc)

    def save(self, path) -> None:
        dump_yaml(self.to_dict(), path)


@dataclass
class PreparedCase:
    spec: CaseSpec
    grid: object
    tissues: TissueSet  # CTV-based
    beamlets: object
    scen: ScenarioSet
    bank: EvaluationBank

    @property
    def ctv(self) -> np.ndarray:
        return self.tissues[TUMOR].voxels

    def planning_tissues(self, margin_mm: float) -> TissueSet:
        return self.tissues.with_target(TUMOR, dilate(self.ctv, margin_mm, self.grid))


def prepare_case(cfg: RunConfig) -> PreparedCase:
    grid, tissues, beams = generate_case(cfg.case)
    if cfg.P == 1:
        scen = nominal_only()
    else:
        scen = sample_miga(cfg.case.shift_std_mm, cfg.P, derive_seed(cfg.seed, STREAM_SCENARIO))
    bank = evaluation_bank(grid, tissues, tissues[TUMOR].voxels, beams, cfg.case.kernel, scen)
    return PreparedCase(cfg.case, grid, tissues, beams, scen, bank)


@dataclass
class RunResult:
    config: RunConfig
    traces: list[SimulationTrace]
    report: EvaluationReport
    policy: StagePolicy | None = None
    train_report: TrainReport | None = None
    plan: np.ndarray | None = None
    data: PlanningData | None = None
    bank: EvaluationBank | None = None


def stochastic_data(cfg: RunConfig, case: PreparedCase) -> PlanningData:
    tissues = case.planning_tissues(cfg.planning_margin)
    sample = sample_voxels(tissues, cfg.voxel_rate, derive_seed(cfg.seed, STREAM_VOXELS))
    return planning_data(case.grid, tissues, case.beamlets, cfg.case.kernel, case.scen, cfg.F, sample)


def train_policy(cfg: RunConfig, case: PreparedCase, data: PlanningData | None = None, log=None):
    data = data or stochastic_data(cfg, case)
    opts = TrainOptions(seed=derive_seed(cfg.seed, STREAM_SDDP), **cfg.sddp)
    return train(data, rmod.parse(cfg.risk), opts, solver=get_solver(cfg.lp_backend, cfg.threads), log=log)


def run_stochastic(cfg: RunConfig, case: PreparedCase | None = None, log=None) -> RunResult:
    case = case or prepare_case(cfg)
    data = stochastic_data(cfg, case)
    policy, rep = train_policy(cfg, case, data, log)
    traces = simulate(policy, cfg.n_sim, derive_seed(cfg.seed, STREAM_SIM), case.bank,
                      cfg.out_of_sample, case.scen)
    report = evaluate(traces, case.bank, cfg.case.name, cfg.model_id, cfg.seed)
    report.provenance.update(_provenance(cfg, rep))
    return RunResult(cfg, traces, report, policy, rep, None, data, case.bank)


def deterministic_plan(cfg: RunConfig, case: PreparedCase) -> tuple[np.ndarray, PlanningData]:
    """Nominal-geometry plan on the margin-expanded target, without voxel sampling."""
    tissues = case.planning_tissues(cfg.planning_margin)
    data = planning_data(case.grid, tissues, case.beamlets, cfg.case.kernel, nominal_only(), cfg.F)
    return solve_deterministic(data, get_solver(cfg.lp_backend, cfg.threads)).x, data


def run_deterministic(cfg: RunConfig, case: PreparedCase | None = None, log=None) -> RunResult:
    case = case or prepare_case(cfg)
    x, data = deterministic_plan(cfg, case)
    traces = replay_deterministic(x, case.scen.probabilities, cfg.n_sim, derive_seed(cfg.seed, STREAM_SIM),
                                  case.bank, None, cfg.out_of_sample, case.scen)
    report = evaluate(traces, case.bank, cfg.case.name, cfg.model_id, cfg.seed)
    report.provenance.update(_provenance(cfg, None))
    return RunResult(cfg, traces, report, None, None, x, data, case.bank)


def run(cfg: RunConfig, case: PreparedCase | None = None, log=None) -> RunResult:
    return (run_deterministic if cfg.deterministic else run_stochastic)(cfg, case, log)


def _provenance(cfg: RunConfig, rep: TrainReport | None) -> dict:
    out = {"F": cfg.F, "P": cfg.P, "risk": None if cfg.deterministic else cfg.risk,
           "voxel_rate": 1.0 if cfg.deterministic else cfg.voxel_rate,
           "margin_mm": cfg.planning_margin, "seed": cfg.seed}
    if rep is not None:
        out.update({"sddp_iterations": rep.iterations, "stop_reason": rep.stop_reason,
                    "lower_bound": rep.lower_bounds[-1]})
    return out


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    d = cfg.to_dict()
    d.update(kw)
    return RunConfig.from_dict(d)


SWEEP_METRICS = [("coverage", TUMOR), ("min_dose", TUMOR), ("max_dose", TUMOR), ("hotspot", TUMOR)]


def margin_sweep(cfg: RunConfig, margins, log=None) -> dict[str, EvaluationReport]:
    """Deterministic plans at each margin plus one stochastic plan at the configured margin."""
    margins = list(margins)
    if not margins:
        raise ValueError("empty margin list")
    case = prepare_case(cfg)
    out = {}
    for m in margins:
        r = run_deterministic(with_overrides(cfg, deterministic=True, margin_mm=float(m)), case)
        out[f"det {m:g}mm"] = r.report
    r = run_stochastic(with_overrides(cfg, deterministic=False), case, log)
    out[f"stoch {cfg.planning_margin if not cfg.deterministic else cfg.case.ctv_plus_margin_mm:g}mm"] = r.report
    return out


def fraction_sweep(cfg: RunConfig, fractions, log=None) -> dict[str, EvaluationReport]:
    fractions = list(fractions)
    if not fractions:
        raise ValueError("empty fraction list")
    case = prepare_case(cfg)
    return {f"{F}F": run(with_overrides(cfg, F=int(F)), case, log).report for F in fractions}


def sweep_table(reports: dict[str, EvaluationReport], tissues=None) -> str:
    """One column per run, one row per (tissue, metric) K-interval."""
    cols = list(reports)
    first = reports[cols[0]]
    names = tissues or list(first.intervals)
    lines = ["\t".join(["tissue", "metric"] + cols)]
    for t in names:
        for m in first.intervals.get(t, {}):
            cells = []
            for c in cols:
                lo, _, hi = reports[c].intervals[t][m]
                cells.append(f"[{lo:.4f}, {hi:.4f}]")
            lines.append("\t".join([t, m] + cells))
    return "\n".join(lines) + "\n"


def write_run(result: RunResult, root) -> str:
    """Write ``<root>/<case>/<model>/{policy, traces, reports}``; returns the run directory."""
    from .simulate import write_trace_doses, write_traces_csv

    cfg = result.config
    base = os.path.join(root, cfg.case.name, cfg.model_id)
    for sub in ("policy", "traces", "reports"):
        os.makedirs(os.path.join(base, sub), exist_ok=True)
    cfg.save(os.path.join(base, "config.yaml"))
    if result.policy is not None:
        result.policy.save(os.path.join(base, "policy", "policy.json"))
        with open(os.path.join(base, "policy", "train_report.json"), "w") as fh:
            json.dump(result.train_report.to_dict(), fh, indent=1)
            fh.write("\n")
    if result.plan is not None:
        with open(os.path.join(base, "policy", "plan.json"), "w") as fh:
            json.dump({"x": np.asarray(result.plan).tolist()}, fh)
            fh.write("\n")
    write_traces_csv(result.traces, os.path.join(base, "traces", "traces.csv"))
    if result.bank is not None:
        write_trace_doses(result.traces, result.bank, os.path.join(base, "traces", "doses.dose"))
    result.report.save(os.path.join(base, "reports", "report.json"))
    with open(os.path.join(base, "reports", "report.txt"), "w") as fh:
        fh.write(result.report.table())
    result.report.write_dvh(os.path.join(base, "reports"))
    return base

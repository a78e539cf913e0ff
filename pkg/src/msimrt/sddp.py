"""Stochastic dual dynamic programming for the decision-hazard fraction chain.

Cuts on ``policy.cuts[f - 1]`` under-approximate the (risk-adjusted) value
of fractions ``f + 1 .. F`` as a function of the cumulative dose entering
fraction ``f + 1``; they are consumed by the epigraph variables of the
fraction-``f`` LP.  The last fraction carries no cuts.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import riskmeasure as rmod
from .lp import get_solver
from .model import Cut, PlanningData, StageProblem, StageSolution, build_stages
from .riskmeasure import RiskMeasure
from .scenario import draw_path

POLICY_FORMAT = "msimrt-policy"
POLICY_VERSION = 1

STREAM_FORWARD = 11
STREAM_STATISTICAL = 12


class PolicyStateError(RuntimeError):
    """The policy has not been trained (or loaded) yet."""


@dataclass
class TrainOptions:
    max_iters: int = 200
    forward_paths: int = 1
    window: int = 20
    epsilon: float = 1e-4
    z: float = 1.96
    n_statistical: int = 50
    statistical_every: int = 10
    stopping: str = "auto"  # auto | statistical | bound_stall | none
    seed: int = 0
    cut_cap: int = 5000
    time_limit_s: float | None = None

    def __post_init__(self):
        if self.max_iters < 1 or self.forward_paths < 1 or self.window < 1:
            raise ValueError("max_iters, forward_paths and window must be positive")
        if self.stopping not in ("auto", "statistical", "bound_stall", "none"):
            raise ValueError(f"unknown stopping rule {self.stopping!r}")
        if self.n_statistical < 2:
            raise ValueError("the statistical rule needs at least two simulations")


@dataclass
class TrainReport:
    iterations: int
    lower_bounds: list[float]
    forward_costs: list[float]
    wall_time_s: float
    stop_reason: str
    statistical: list[dict] = field(default_factory=list)

    def to_dict(self, include_time: bool = False) -> dict:
        out = asdict(self)
        if not include_time:
            out.pop("wall_time_s")
        return out


class StagePolicy:
    """Stage LPs plus their cut sets; acts as the feedback policy ``x_f = pi_f(I_f)``."""

    def __init__(self, data: PlanningData, rm: RiskMeasure = rmod.EXPECTATION, solver=None,
                 stages: list[StageProblem] | None = None):
        self.data = data
        self.rm = rm
        self.solver = solver if solver is not None else get_solver()
        self.stages = stages if stages is not None else build_stages(data, rm)
        self.cuts: list[list[Cut]] = [[] for _ in range(data.F)]
        self._active: list[list[int]] = [[] for _ in range(data.F)]
        self.bounds: list[float] = []
        self.iterations = 0
        self.meta: dict = {}

    @property
    def F(self) -> int:
        return self.data.F

    @property
    def trained(self) -> bool:
        return self.iterations > 0

    def solve_node(self, f: int, state, iteration: int | None = None) -> StageSolution:
        cuts = self.cuts[f - 1]
        sol = self.stages[f - 1].solve(state, cuts, self.solver)
        if cuts and iteration is not None:
            start = self.stages[f - 1].A0.shape[0]
            y = sol.lp.duals[start:].reshape(len(cuts), self.data.P)
            active = self._active[f - 1]
            for k in np.flatnonzero(np.abs(y).max(axis=1) > 1e-12):
                active[k] = iteration
        return sol

    def add_cut(self, cut: Cut, cap: int) -> None:
        f = cut.stage
        self.cuts[f - 1].append(cut)
        self._active[f - 1].append(cut.iteration)
        if len(self.cuts[f - 1]) > cap:
            # drop the cut that has been non-binding for longest (oldest first on ties)
            act = self._active[f - 1]
            k = min(range(len(act)), key=lambda i: (act[i], self.cuts[f - 1][i].iteration, i))
            del self.cuts[f - 1][k]
            del act[k]

    def value_function(self, f: int, state) -> float:
        """Outer approximation of the value of fractions ``f + 1 .. F`` at ``state``."""
        cuts = self.cuts[f - 1]
        if f == self.F:
            return 0.0
        if not cuts:
            return 0.0
        return max(c.value(state) for c in cuts)

    # -------------------------------------------------------- persistence
    def to_dict(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "risk": str(self.rm),
            "F": self.F,
            "P": self.data.P,
            "n_voxels": self.data.n_voxels,
            "n_beamlets": self.data.n_beamlets,
            "iterations": self.iterations,
            "lower_bounds": self.bounds,
            "meta": self.meta,
            "cuts": [[{"iteration": c.iteration, "intercept": c.intercept, "gradient": c.gradient.tolist()}
                      for c in stage] for stage in self.cuts],
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict, data: PlanningData, solver=None) -> "StagePolicy":
        if doc.get("format") != POLICY_FORMAT:
            raise ValueError("not a policy file")
        if doc.get("version") != POLICY_VERSION:
            raise ValueError(f"unsupported policy version {doc.get('version')}")
        shape = (data.F, data.P, data.n_voxels, data.n_beamlets)
        if (doc["F"], doc["P"], doc["n_voxels"], doc["n_beamlets"]) != shape:
            raise ValueError("policy does not match the planning data")
        pol = cls(data, rmod.parse(doc["risk"]), solver)
        for f, stage in enumerate(doc["cuts"], start=1):
            for c in stage:
                pol.cuts[f - 1].append(Cut(f, float(c["intercept"]), np.asarray(c["gradient"], dtype=float),
                                           int(c["iteration"])))
                pol._active[f - 1].append(int(c["iteration"]))
        pol.iterations = int(doc["iterations"])
        pol.bounds = [float(v) for v in doc["lower_bounds"]]
        pol.meta = dict(doc.get("meta", {}))
        return pol

    @classmethod
    def load(cls, path, data: PlanningData, solver=None) -> "StagePolicy":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), data, solver)


def lower_bound(policy: StagePolicy) -> float:
    """First-fraction LP value at zero dose with the current cuts."""
    if not policy.trained:
        raise PolicyStateError("policy has not been trained")
    return policy.solve_node(1, np.zeros(policy.data.n_voxels)).value


def forward_pass(policy: StagePolicy, rng: np.random.Generator, iteration: int | None = None):
    """One sampled trajectory: entering states, decisions and the realised total cost."""
    d = policy.data
    state = np.zeros(d.n_voxels)
    path = draw_path(d.probabilities, d.F, rng)
    states, decisions, cost = [], [], 0.0
    for f in range(1, d.F + 1):
        sol = policy.solve_node(f, state, iteration)
        p = path[f - 1]
        states.append(state)
        decisions.append(sol.x)
        cost += sol.costs[p]
        state = state + d.doses[p] @ sol.x
    return states, decisions, path, cost


def backward_pass(policy: StagePolicy, states, decisions, iteration: int, cap: int) -> None:
    d = policy.data
    for f in range(d.F, 1, -1):
        # children of the trial point of fraction f-1, one per realisation
        base, x = states[f - 2], decisions[f - 2]
        children = []
        for D in d.doses:
            s = base + D @ x
            if not any(np.array_equal(s, c) for c in children):
                children.append(s)
        for s in children:
            sol = policy.solve_node(f, s, iteration)
            g = sol.gradient
            policy.add_cut(Cut(f - 1, float(sol.value - g @ s), g, iteration), cap)


def should_stop(bounds, forward_costs, opts: TrainOptions, rm: RiskMeasure = rmod.EXPECTATION,
                iteration: int | None = None, statistical: tuple[float, float, int] | None = None):
    """Stopping decision and reason (``""`` while continuing).

    ``statistical`` is ``(mean, std, M)`` of fresh forward-simulation costs;
    the risk-neutral rule stops once the bound reaches their lower
    confidence limit.  Risk-averse runs stop when the bound stalls.
    """
    it = len(bounds) if iteration is None else iteration
    rule = opts.stopping
    if rule == "auto":
        rule = "statistical" if all(k == rmod.E for _, k, _ in rm.terms()) else "bound_stall"
    if rule == "statistical" and statistical is not None and bounds:
        mean, std, m = statistical
        if bounds[-1] >= mean - opts.z * std / math.sqrt(m):
            return True, "statistical"
    if rule == "bound_stall" and len(bounds) > opts.window:
        old, new = bounds[-opts.window - 1], bounds[-1]
        if new - old <= opts.epsilon * max(abs(new), 1e-12):
            return True, "bound_stall"
    if it >= opts.max_iters:
        return True, "max_iters"
    return False, ""


def _statistical_estimate(policy: StagePolicy, rng, m: int) -> tuple[float, float, int]:
    costs = [forward_pass(policy, rng)[3] for _ in range(m)]
    return float(np.mean(costs)), float(np.std(costs, ddof=1)), m


def train(data: PlanningData, rm: RiskMeasure = rmod.EXPECTATION, opts: TrainOptions | None = None,
          solver=None, policy: StagePolicy | None = None, log=None) -> tuple[StagePolicy, TrainReport]:
    opts = opts or TrainOptions()
    policy = policy or StagePolicy(data, rm, solver)
    t0 = time.perf_counter()
    fwd_rng = np.random.default_rng(np.random.SeedSequence([opts.seed, STREAM_FORWARD]))
    stat_rng = np.random.default_rng(np.random.SeedSequence([opts.seed, STREAM_STATISTICAL]))
    costs: list[float] = []
    stats: list[dict] = []
    zero = np.zeros(data.n_voxels)
    if data.F == 1:
        policy.iterations = 1
        policy.bounds = [policy.solve_node(1, zero).value]
        report = TrainReport(1, list(policy.bounds), [policy.bounds[0]], time.perf_counter() - t0, "single_stage")
        return policy, report
    reason = ""
    while True:
        it = policy.iterations + 1
        trial_costs = []
        for _ in range(opts.forward_paths):
            states, decisions, _, cost = forward_pass(policy, fwd_rng, it)
            backward_pass(policy, states, decisions, it, opts.cut_cap)
            trial_costs.append(cost)
        policy.iterations = it
        lb = policy.solve_node(1, zero, it).value
        policy.bounds.append(lb)
        costs.append(float(np.mean(trial_costs)))
        est = None
        rule_stat = opts.stopping == "statistical" or (
            opts.stopping == "auto" and all(k == rmod.E for _, k, _ in rm.terms()))
        if rule_stat and it >= opts.window and it % opts.statistical_every == 0:
            est = _statistical_estimate(policy, stat_rng, opts.n_statistical)
            stats.append({"iteration": it, "mean": est[0], "std": est[1], "M": est[2]})
        if log is not None:
            log(f"iteration {it}: lower bound {lb:.6g}")
        stop, reason = should_stop(policy.bounds, costs, opts, rm, it, est)
        if not stop and opts.time_limit_s is not None and time.perf_counter() - t0 > opts.time_limit_s:
            stop, reason = True, "time_limit"
        if stop:
            break
    report = TrainReport(policy.iterations, list(policy.bounds), costs, time.perf_counter() - t0, reason, stats)
    policy.meta.update({"seed": opts.seed, "stop_reason": reason})
    return policy, report

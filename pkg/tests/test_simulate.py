import numpy as np
import pytest

from msimrt import lp, model
from msimrt import riskmeasure as rm
from msimrt.sddp import PolicyStateError, StagePolicy, TrainOptions, train
from msimrt.artifacts import read_dose
from msimrt.simulate import (EvalTissue, EvaluationBank, SimulationTrace, replay_deterministic, simulate,
                             write_trace_doses, write_traces_csv)

from conftest import tiny_data


@pytest.fixture(scope="module")
def trained():
    d = tiny_data(np.random.default_rng(21), F=3, P=3, nv=4, nb=2)
    pol, _ = train(d, rm.EXPECTATION, TrainOptions(stopping="bound_stall", epsilon=1e-10, window=10),
                   solver=lp.HighsSolver())
    bank = EvaluationBank(np.arange(4), [EvalTissue("Tumor_0", "tumor", np.arange(2), 5.0, 6.0)],
                          [D.copy() for D in d.doses])
    return d, pol, bank


def test_trace_invariants(trained):
    d, pol, bank = trained
    traces = simulate(pol, 50, seed=1, bank=bank)
    assert len(traces) == 50
    for t in traces:
        assert t.z.min() >= 0
        assert np.allclose(t.cumulative, t.z.sum(axis=0), atol=1e-9)
        state = np.zeros(d.n_voxels)
        for f in range(d.F):
            z = d.doses[t.path[f]] @ t.x[f]
            assert np.allclose(z, t.plan_z[f], atol=1e-12)
            assert t.stage_costs[f] == pytest.approx(d.realized_cost(z, state + z, f + 1), abs=1e-9)
            state = state + z
        assert np.allclose(t.gamma_plus, np.maximum(state - d.t_plus, 0))


def test_decisions_depend_only_on_history(trained):
    d, pol, bank = trained
    traces = simulate(pol, 60, seed=2, bank=bank)
    first = {tuple(t.x[0]) for t in traces}
    assert len(first) == 1


def test_seed_determinism(trained):
    d, pol, bank = trained
    a, b = simulate(pol, 10, seed=4, bank=bank), simulate(pol, 10, seed=4, bank=bank)
    assert all(np.array_equal(x.z, y.z) and np.array_equal(x.path, y.path) for x, y in zip(a, b))


def test_mean_cost_above_lower_bound(trained):
    d, pol, _ = trained
    costs = [t.total_cost for t in simulate(pol, 200, seed=5)]
    assert np.mean(costs) >= pol.bounds[-1] - 3 * np.std(costs, ddof=1) / np.sqrt(200)


def test_single_atom_traces_identical():
    d = tiny_data(np.random.default_rng(3), F=2, P=1)
    pol, _ = train(d, rm.WORST_CASE, TrainOptions(max_iters=5, stopping="none"), solver=lp.HighsSolver())
    traces = simulate(pol, 5, seed=0)
    assert all(np.array_equal(t.plan_z, traces[0].plan_z) for t in traces)


def test_untrained_policy_rejected():
    d = tiny_data(np.random.default_rng(0), F=2, P=2)
    with pytest.raises(PolicyStateError):
        simulate(StagePolicy(d, solver=lp.HighsSolver()), 3)


def test_replay_zero_plan():
    d = tiny_data(np.random.default_rng(0), F=2, P=2)
    bank = EvaluationBank(np.arange(3), [EvalTissue("Tumor_0", "tumor", np.arange(1), 5.0, 6.0)], d.doses)
    traces = replay_deterministic(np.zeros((2, 2)), d.probabilities, 4, bank=bank)
    assert all(t.z.max() == 0 for t in traces)


def test_replay_nominal_matches_model_prediction():
    d = tiny_data(np.random.default_rng(6), F=2, P=1, nv=3, nb=2)
    plan = model.solve_deterministic(d, lp.HighsSolver())
    traces = replay_deterministic(plan.x, [1.0], 3, cost_data=d)
    for t in traces:
        assert np.allclose(t.plan_z, np.stack([d.doses[0] @ x for x in plan.x]), atol=1e-9)
        assert t.total_cost == pytest.approx(plan.objective, abs=1e-8)
        assert np.array_equal(t.x[0], t.x[1])


def test_replay_variance_with_distinct_atoms():
    D = [np.array([[1.0]]), np.array([[0.5]])]
    bank = EvaluationBank(np.arange(1), [EvalTissue("Tumor_0", "tumor", np.arange(1), 1.0, 2.0)], D)
    traces = replay_deterministic(np.ones((3, 1)), [0.5, 0.5], 200, seed=3, bank=bank)
    totals = np.array([t.cumulative[0] for t in traces])
    assert totals.var() > 0 and set(np.round(totals, 9)) <= {1.5, 2.0, 2.5, 3.0}


def test_trace_export(tmp_path, trained):
    d, pol, bank = trained
    traces = simulate(pol, 3, seed=0, bank=bank)
    write_traces_csv(traces, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * d.F


def test_trace_dose_export_matches_traces(tmp_path):
    rng = np.random.default_rng(0)
    bank = EvaluationBank(np.arange(5), [EvalTissue("Tumor_0", "tumor", np.array([0, 1])),
                                         EvalTissue("OAR_0", "oar", np.array([3])),
                                         EvalTissue("HealthyZone", "zone", np.array([2, 4]))], [np.ones((5, 1))])
    traces = [SimulationTrace(np.zeros(2, int), np.ones((2, 1)), rng.random((2, 5)), np.zeros((2, 0)),
                              np.zeros(2), np.zeros(0), np.zeros(0)) for _ in range(3)]
    cols = write_trace_doses(traces, bank, tmp_path / "d.dose")
    m = read_dose(tmp_path / "d.dose")
    assert cols.tolist() == [0, 1, 3] and m.shape == (6, 3)
    assert np.array_equal(m[3], traces[1].z[1, cols])

import json

import numpy as np
import pytest

from msimrt import lp, model, sddp
from msimrt import riskmeasure as rm
from msimrt.sddp import PolicyStateError, StagePolicy, TrainOptions, lower_bound, should_stop, train

from conftest import tiny_data
from oracles import tree_value

STALL = dict(stopping="bound_stall", epsilon=1e-10, window=15, max_iters=120)


def test_single_fraction_needs_no_cuts():
    d = tiny_data(np.random.default_rng(0), F=1, P=2)
    pol, rep = train(d, rm.EXPECTATION, TrainOptions(), solver=lp.SimplexSolver())
    assert rep.iterations == 1 and all(len(c) == 0 for c in pol.cuts)
    direct = model.StageProblem(d, 1).solve(np.zeros(d.n_voxels), None, lp.SimplexSolver()).value
    assert lower_bound(pol) == pytest.approx(direct)


def test_two_by_two_expectation_converges():
    d = tiny_data(np.random.default_rng(1), F=2, P=2, nv=2, nb=2)
    pol, rep = train(d, rm.EXPECTATION, TrainOptions(**{**STALL, "max_iters": 50}), solver=lp.SimplexSolver())
    exact = tree_value(d)
    assert abs(pol.bounds[-1] - exact) <= 1e-4 * max(1.0, abs(exact))
    assert rep.iterations <= 50


def test_two_by_two_worst_case_converges():
    d = tiny_data(np.random.default_rng(2), F=2, P=2, nv=2, nb=2)
    pol, _ = train(d, rm.WORST_CASE, TrainOptions(**STALL), solver=lp.SimplexSolver())
    exact = tree_value(d, worst_case=True)
    assert abs(pol.bounds[-1] - exact) <= 1e-4 * max(1.0, abs(exact))


def test_lower_bound_monotone_over_many_iterations():
    d = tiny_data(np.random.default_rng(3), F=3, P=3, nv=4, nb=3, uniform=False)
    opts = TrainOptions(stopping="none", max_iters=100, seed=5)
    pol, rep = train(d, rm.EXPECTATION, opts, solver=lp.HighsSolver())
    assert rep.iterations == 100
    assert np.all(np.diff(pol.bounds) >= -1e-9)


def test_cut_validity_against_exact_value():
    rng = np.random.default_rng(4)
    d = tiny_data(rng, F=3, P=2, nv=3, nb=2)
    pol, _ = train(d, rm.EXPECTATION, TrainOptions(stopping="none", max_iters=25), solver=lp.HighsSolver())
    for f in (1, 2):
        cuts = pol.cuts[f - 1]
        assert cuts
        for _ in range(50):
            state = rng.uniform(0, 8, d.n_voxels)
            approx = max(c.value(state) for c in cuts)
            assert approx <= tree_value(d, f0=f + 1, state=state) + 1e-7


@pytest.mark.parametrize("name", list(rm.STANDARD_MEASURES))
def test_single_atom_reduces_to_deterministic(name):
    d = tiny_data(np.random.default_rng(6), F=3, P=1, nv=3, nb=2)
    pol, _ = train(d, rm.STANDARD_MEASURES[name], TrainOptions(**STALL), solver=lp.HighsSolver())
    det = model.solve_deterministic(d, lp.HighsSolver()).objective
    assert pol.bounds[-1] == pytest.approx(det, rel=1e-6, abs=1e-8)


def test_zero_cost_problem():
    d = tiny_data(np.random.default_rng(0), F=2, P=2)
    for arr in (d.w_over, d.w_under, d.a_over, d.a_under):
        arr[:] = 0.0
    pol, _ = train(d, rm.EXPECTATION, TrainOptions(max_iters=3, stopping="none"), solver=lp.HighsSolver())
    assert lower_bound(pol) == pytest.approx(0.0, abs=1e-12)


def test_untrained_policy():
    d = tiny_data(np.random.default_rng(0), F=2, P=2)
    with pytest.raises(PolicyStateError):
        lower_bound(StagePolicy(d, solver=lp.HighsSolver()))


def test_stopping_rules():
    opts = TrainOptions(window=20, epsilon=1e-4, max_iters=500)
    flat = [5.0] * 21
    assert should_stop(flat, [], opts, rm.WORST_CASE) == (True, "bound_stall")
    rising = list(np.linspace(1, 5, 21))
    assert should_stop(rising, [], opts, rm.WORST_CASE) == (False, "")
    assert should_stop([4.0], [], opts, rm.EXPECTATION, statistical=(4.1, 1.0, 50)) == (True, "statistical")
    assert should_stop([1.0], [], opts, rm.EXPECTATION, statistical=(9.0, 1.0, 50)) == (False, "")
    assert should_stop([1.0] * 3, [], TrainOptions(max_iters=3), rm.EXPECTATION) == (True, "max_iters")


def test_training_is_deterministic_and_round_trips(tmp_path):
    d = tiny_data(np.random.default_rng(9), F=3, P=3, nv=3, nb=2)
    opts = TrainOptions(stopping="none", max_iters=10, seed=3)
    a, _ = train(d, rm.parse("E+avar:0.8"), opts, solver=lp.HighsSolver())
    b, _ = train(d, rm.parse("E+avar:0.8"), opts, solver=lp.HighsSolver())
    assert a.to_dict() == b.to_dict()
    a.save(tmp_path / "p.json")
    back = StagePolicy.load(tmp_path / "p.json", d, lp.HighsSolver())
    assert back.to_dict() == a.to_dict()
    assert lower_bound(back) == pytest.approx(lower_bound(a), abs=1e-10)
    doc = json.loads((tmp_path / "p.json").read_text())
    doc["version"] = 99
    with pytest.raises(ValueError):
        StagePolicy.from_dict(doc, d)


def test_cut_cap_drops_inactive_cuts():
    d = tiny_data(np.random.default_rng(10), F=2, P=2)
    pol, _ = train(d, rm.EXPECTATION, TrainOptions(stopping="none", max_iters=12, cut_cap=5),
                   solver=lp.HighsSolver())
    assert len(pol.cuts[0]) <= 5


def test_forward_cost_statistics_bracket_bound():
    d = tiny_data(np.random.default_rng(12), F=2, P=3, nv=3, nb=2)
    pol, _ = train(d, rm.EXPECTATION, TrainOptions(**STALL), solver=lp.HighsSolver())
    rng = np.random.default_rng(0)
    costs = [sddp.forward_pass(pol, rng)[3] for _ in range(400)]
    m, s = np.mean(costs), np.std(costs, ddof=1)
    assert pol.bounds[-1] <= m + 3 * s / np.sqrt(len(costs))
    assert pol.bounds[-1] >= m - 3 * s / np.sqrt(len(costs))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from msimrt import lp
from msimrt.lp import GE, LE, ContractViolation, LinearProgram, SimplexSolver, Status

from conftest import random_lp
from oracles import enumerate_vertices


def test_one_dimensional():
    sol = SimplexSolver().solve(LinearProgram([1.0], [[1.0]], [GE], [3.0]))
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(3.0)
    assert sol.objective == pytest.approx(3.0)
    assert lp.dual_wrt_rhs(sol, 0) == pytest.approx(1.0)


def test_textbook_max():
    sol = SimplexSolver().solve(LinearProgram([-1.0, -1.0], [[1.0, 1.0]], [LE], [1.0]))
    assert sol.objective == pytest.approx(-1.0)
    assert sol.x.sum() == pytest.approx(1.0)


def test_nonbinding_row_has_zero_dual():
    prob = LinearProgram([1.0], [[1.0], [1.0]], [GE, GE], [3.0, 1.0])
    sol = SimplexSolver().solve(prob)
    assert lp.dual_wrt_rhs(sol, 1) == pytest.approx(0.0)


@pytest.mark.parametrize("b", [-2.0, 0.0, 4.5])
def test_dual_of_linear_value_function(b):
    sol = SimplexSolver().solve(LinearProgram([1.0], [[1.0]], [GE], [b], lb=[-np.inf]))
    assert lp.dual_wrt_rhs(sol, 0) == pytest.approx(1.0)


def test_statuses():
    infeasible = LinearProgram([1.0], [[1.0], [1.0]], [GE, LE], [2.0, 1.0])
    unbounded = LinearProgram([-1.0], [[1.0]], [GE], [0.0])
    s = SimplexSolver()
    assert s.solve(infeasible).status is Status.INFEASIBLE
    assert s.solve(unbounded).status is Status.UNBOUNDED
    with pytest.raises(ContractViolation):
        lp.dual_wrt_rhs(s.solve(infeasible), 0)


def test_iteration_limit():
    rng = np.random.default_rng(0)
    prob = random_lp(rng, 12, 12)
    assert SimplexSolver(max_iter=1).solve(prob).status in (Status.ITER_LIMIT, Status.OPTIMAL)


def test_random_lps_strong_duality():
    rng = np.random.default_rng(7)
    for _ in range(50):
        m, n = rng.integers(2, 25, size=2)
        prob = random_lp(rng, m, n)
        sol = SimplexSolver().solve(prob)
        assert sol.status is Status.OPTIMAL
        assert prob.primal_residual(sol.x) <= 1e-7 * (1 + np.abs(prob.b).max())
        assert lp.duality_gap(prob, sol) <= 1e-6 * (1 + abs(sol.objective))


def test_vertex_enumeration_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        A = rng.uniform(0.1, 1.0, (m, n))
        b = rng.uniform(1.0, 3.0, m)
        c = rng.normal(size=n)
        sol = SimplexSolver().solve(LinearProgram(c, A, [LE] * m, b))
        assert sol.objective == pytest.approx(enumerate_vertices(c, A, b), abs=1e-6)


def test_dual_matches_finite_difference():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 10:
        prob = random_lp(rng, 6, 8)
        sol = SimplexSolver().solve(prob)
        if not sol.optimal:
            continue
        for i in range(prob.shape[0]):
            h = 1e-3
            vals = []
            for sgn in (-1, 1):
                b = prob.b.copy()
                b[i] += sgn * h
                s2 = SimplexSolver().solve(LinearProgram(prob.c, prob.A, prob.senses, b, prob.lb, prob.ub))
                vals.append(s2.objective if s2.optimal else np.nan)
            left, right = (sol.objective - vals[0]) / h, (vals[1] - sol.objective) / h
            if np.isnan(vals).any() or abs(left - right) > 1e-6:
                continue  # degenerate row: one-sided derivatives differ
            assert lp.dual_wrt_rhs(sol, i) == pytest.approx(right, abs=1e-4)
            checked += 1


def test_deterministic_bases():
    rng = np.random.default_rng(5)
    prob = random_lp(rng, 10, 14)
    a, b = SimplexSolver().solve(prob), SimplexSolver().solve(prob)
    assert np.array_equal(a.basis.basic, b.basis.basic)
    assert np.array_equal(a.x, b.x)


def test_warm_start_reuses_basis():
    rng = np.random.default_rng(9)
    prob = random_lp(rng, 8, 10)
    s = SimplexSolver()
    first = s.solve(prob)
    again = s.solve(prob, warm_start=first.basis)
    assert again.objective == pytest.approx(first.objective, abs=1e-9)
    assert again.iterations <= first.iterations


@given(st.integers(0, 10_000))
def test_highs_agrees_with_simplex(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    prob = random_lp(rng, m, n, bounded=bool(rng.integers(2)))
    a, h = SimplexSolver().solve(prob), lp.HighsSolver().solve(prob)
    assert a.status == h.status
    if a.optimal:
        assert a.objective == pytest.approx(h.objective, rel=1e-7, abs=1e-7)
        assert lp.duality_gap(prob, h) <= 1e-6 * (1 + abs(h.objective))


def test_persistent_model_rows_and_rhs():
    prob = LinearProgram([1.0, 1.0], [[1.0, 0.0]], [GE], [1.0])
    model = lp.HighsSolver().model(prob)
    assert model.solve().objective == pytest.approx(1.0)
    model.add_rows(np.array([[0.0, 1.0]]), np.array([GE]), np.array([2.0]))
    assert model.solve().objective == pytest.approx(3.0)
    model.set_rhs([0, 1], np.array([GE, GE]), np.array([4.0, 0.5]))
    sol = model.solve()
    assert sol.objective == pytest.approx(4.5)
    assert sol.duals == pytest.approx([1.0, 1.0])


def test_backend_selection(monkeypatch):
    assert isinstance(lp.get_solver("simplex"), SimplexSolver)
    monkeypatch.setenv("MSIMRT_LP_BACKEND", "highs")
    assert isinstance(lp.get_solver(), lp.HighsSolver)
    with pytest.raises(ValueError):
        lp.get_solver("cplex")


def test_rejects_malformed():
    with pytest.raises(ValueError):
        LinearProgram([1.0, 2.0], [[1.0]], [GE], [1.0])
    with pytest.raises(ValueError):
        LinearProgram([np.nan], [[1.0]], [GE], [1.0])


def test_mps_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    prob = random_lp(rng, 5, 6)
    prob.lb[0], prob.ub[1] = -np.inf, np.inf
    path = tmp_path / "p.mps"
    lp.write_mps(prob, path)
    back = lp.read_mps(path)
    a, b = SimplexSolver().solve(prob), SimplexSolver().solve(back)
    assert a.objective == pytest.approx(b.objective, abs=1e-9)

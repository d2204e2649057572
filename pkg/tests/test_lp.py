import numpy as np
import pytest

from edgematrix import lp as lpmod
from edgematrix.cli import random_lp_instance
from edgematrix.lp import LinearProgram, duality_gap_check, enumerate_optimum, solve_lp


def box_lp(c, u, rows=(), rhs=()):
    return LinearProgram(objective_c=np.array(c, dtype=float),
                         rows=[(np.array(i), np.array(v, dtype=float)) for i, v in rows],
                         rhs_b=np.array(rhs, dtype=float),
                         upper_bounds_u=np.array(u, dtype=float))


def test_unconstrained_box():
    sol = solve_lp(box_lp([1.0, 1.0], [1.0, 1.0]))
    assert sol.status == "Optimal"
    assert np.allclose(sol.y_star, [1.0, 1.0])
    assert sol.objective_value == pytest.approx(2.0)


def test_single_ratio_constraint():
    sol = solve_lp(box_lp([10.0], [1.0], rows=[([0], [10.0])], rhs=[5.0]))
    assert sol.y_star[0] == pytest.approx(0.5)
    assert sol.objective_value == pytest.approx(5.0)


def test_zero_objective_and_forbidden_vars():
    sol = solve_lp(box_lp([0.0, 0.0], [1.0, 1.0]))
    assert sol.objective_value == 0.0
    assert duality_gap_check(box_lp([0.0, 0.0], [1.0, 1.0]), sol) <= 1e-8
    sol0 = solve_lp(box_lp([3.0, 2.0], [0.0, 0.0]))
    assert np.allclose(sol0.y_star, 0.0)
    assert sol0.objective_value == 0.0


def test_infeasible_negative_rhs():
    prob = box_lp([1.0], [1.0], rows=[([0], [1.0])], rhs=[-2.0])
    assert solve_lp(prob).status == "Infeasible"


def test_negative_rhs_feasible_via_phase1():
    # -y <= -0.3 forces y >= 0.3; minimizing via c = -1 lands on the bound
    prob = box_lp([-1.0], [1.0], rows=[([0], [-1.0])], rhs=[-0.3])
    sol = solve_lp(prob)
    assert sol.status == "Optimal"
    assert sol.y_star[0] == pytest.approx(0.3)


def test_scaling_invariance():
    rng = np.random.default_rng(0)
    for _ in range(20):
        prob = random_lp_instance(rng)
        sol = solve_lp(prob)
        if sol.status != "Optimal":
            continue
        scaled = LinearProgram(objective_c=prob.objective_c * 3.0, rows=prob.rows,
                               rhs_b=prob.rhs_b, upper_bounds_u=prob.upper_bounds_u)
        sol3 = solve_lp(scaled)
        assert np.allclose(sol3.y_star, sol.y_star)
        assert sol3.objective_value == pytest.approx(3.0 * sol.objective_value)


def test_residuals_within_tolerance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        prob = random_lp_instance(rng)
        sol = solve_lp(prob)
        if sol.status != "Optimal":
            continue
        A = prob.dense_matrix()
        assert np.max(A @ sol.y_star - prob.rhs_b) <= 1e-9
        assert np.min(sol.y_star) >= -1e-12
        assert np.max(sol.y_star - prob.upper_bounds_u) <= 1e-12
        assert duality_gap_check(prob, sol) <= 1e-8


def test_oracle_agreement_small_batch():
    rng = np.random.default_rng(2)
    for _ in range(60):
        prob = random_lp_instance(rng)
        sol = solve_lp(prob)
        oracle = enumerate_optimum(prob)
        if sol.status == "Optimal":
            assert oracle is not None
            assert abs(sol.objective_value - oracle[0]) <= 1e-8
        else:
            assert oracle is None


def test_determinism():
    rng = np.random.default_rng(3)
    prob = random_lp_instance(rng)
    a = solve_lp(prob)
    b = solve_lp(prob)
    assert a.status == b.status
    assert np.array_equal(a.y_star, b.y_star)
    assert a.objective_value == b.objective_value


def test_dimension_mismatch():
    with pytest.raises(lpmod.DimensionMismatch):
        LinearProgram(objective_c=np.ones(2), rows=[], rhs_b=np.zeros(0),
                      upper_bounds_u=np.ones(3))


def test_dump_format():
    prob = box_lp([1.0], [1.0], rows=[([0], [2.0])], rhs=[1.0])
    text = prob.dump()
    assert text.startswith("vars 1 rows 1")
    assert "<= 1" in text

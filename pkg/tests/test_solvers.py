import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adunfold.problems import (MeasurementMatrix, ParameterError, ProblemInstance, SparseSignal)
from adunfold.solvers import (Constraint, ista_solve, lasso_objective, oracle_adaptive_pgd, pgd_solve,
                              project_l0, project_l1, soft_threshold, sparsity_measure,
                              theoretical_step_size)
from adunfold.analysis import random_instance

vectors = arrays(np.float64, st.integers(1, 12), elements=st.floats(-10, 10, allow_subnormal=False))


def _instance(A, x, y=None):
    A = np.asarray(A, dtype=float)
    x = np.asarray(x, dtype=float)
    return ProblemInstance(MeasurementMatrix(A, "custom", -1), SparseSignal(x, int(np.count_nonzero(x))),
                           A @ x if y is None else np.asarray(y, dtype=float))


def test_soft_threshold_examples():
    assert np.allclose(soft_threshold([1.2, -0.3, 0.0], 0.5), [0.7, 0, 0], atol=1e-15)
    z = np.array([0.3, -2.0, 5.0])
    assert np.array_equal(soft_threshold(z, 0), z)
    assert not np.any(soft_threshold(z, np.max(np.abs(z))))
    with pytest.raises(ParameterError):
        soft_threshold(z, -1)


def test_project_l0_examples():
    assert np.array_equal(project_l0([3, -1, 2], 2), [3, 0, 2])
    assert np.array_equal(project_l0([1, 1, 1], 1), [1, 0, 0])
    z = np.array([0.5, -4, 2])
    assert np.array_equal(project_l0(z, 3), z)
    with pytest.raises(ParameterError):
        project_l0(z, 0)
    with pytest.raises(ParameterError):
        project_l0(z, 4)


def test_project_l1_examples():
    assert np.allclose(project_l1([2, 0], 1), [1, 0], atol=1e-15)
    assert np.allclose(project_l1([1, 1], 1), [0.5, 0.5], atol=1e-15)
    assert np.array_equal(project_l1([0.2, -0.1], 1), [0.2, -0.1])
    with pytest.raises(ParameterError):
        project_l1([1, 2], 0)


@given(vectors, st.floats(0.01, 20))
def test_l1_projection_idempotent(z, radius):
    p = project_l1(z, radius)
    assert np.max(np.abs(project_l1(p, radius) - p), initial=0) < 1e-12


@given(vectors, st.integers(1, 12))
def test_l0_projection_idempotent(z, s):
    s = min(s, z.size)
    p = project_l0(z, s)
    assert np.array_equal(project_l0(p, s), p)
    assert np.count_nonzero(p) <= s


def test_l1_projection_is_optimal(rng):
    for _ in range(20):
        z = rng.standard_normal(10) * 3
        radius = 0.5 * np.sum(np.abs(z))
        p = project_l1(z, radius)
        assert abs(np.sum(np.abs(p)) - radius) < 1e-10
        d = np.linalg.norm(z - p)
        for _ in range(100):
            v = rng.standard_normal(10)
            v *= radius * rng.uniform() / np.sum(np.abs(v))
            assert d <= np.linalg.norm(z - v) + 1e-12


def test_step_size_values():
    assert abs(theoretical_step_size(1) - np.pi / 2) < 1e-12
    assert abs(theoretical_step_size(2) - 2 / np.pi) < 1e-12
    assert abs(theoretical_step_size(100) * 100 - 1) < 0.02
    with pytest.raises(ParameterError):
        theoretical_step_size(0)


def test_ista_identity_system_converges_in_one_step():
    y = np.array([0.3, -1.0, 2.0])
    inst = _instance(np.eye(3), y)
    tr = ista_solve(inst, 0.0, 1.0, 10)
    assert np.allclose(tr.iterates[1], y, atol=1e-15)
    assert len(tr.iterates) == 3  # x0, x1 and the confirming fixed-point step


def test_ista_objective_monotone():
    inst = random_instance(20, 40, 3, 4)
    beta = 1 / np.linalg.norm(inst.A, 2) ** 2
    obj = np.array(ista_solve(inst, 0.05, beta, 300).objective_values)
    assert np.all(np.diff(obj) <= 1e-12)
    assert obj[0] == lasso_objective(inst.A, inst.y, np.zeros(40), 0.05)


def test_pgd_with_huge_radius_is_gradient_descent():
    inst = random_instance(10, 20, 2, 1)
    beta = 0.5 / np.linalg.norm(inst.A, 2) ** 2
    tr = pgd_solve(inst, Constraint("l1_ball", 1e9), beta, 5)
    x = np.zeros(20)
    for k in range(1, 6):
        x = x - beta * inst.A.T @ (inst.A @ x - inst.y)
        assert np.allclose(tr.iterates[k], x, atol=1e-13)


def test_pgd_perfect_radius_beats_mismatch():
    inst = random_instance(100, 200, 5, 3)
    beta = 0.5 * theoretical_step_size(100)
    f = sparsity_measure(inst.x, "l1_ball")
    good = pgd_solve(inst, Constraint("l1_ball", f), beta, 200).errors_vs_truth
    bad = pgd_solve(inst, Constraint("l1_ball", 0.5 * f), beta, 200).errors_vs_truth
    assert good[-1] < 1e-6
    assert bad[-1] > 10 * good[-1]


def test_constraint_validation():
    with pytest.raises(ParameterError):
        Constraint("l1_ball", 0)
    with pytest.raises(ParameterError):
        Constraint("l0_ball", 2.5)
    with pytest.raises(ParameterError):
        Constraint("l2_ball", 1)
    assert Constraint("l1_ball", 1).kappa == 1 and Constraint("l0_ball", 2).kappa == 2


def test_oracle_single_signal_is_plain_pgd():
    inst = random_instance(40, 80, 3, 2)
    beta = 0.5 * theoretical_step_size(40)
    res = oracle_adaptive_pgd([inst], [50], beta=beta)
    ref = pgd_solve(inst, Constraint("l1_ball", sparsity_measure(inst.x, "l1_ball")), beta, 50)
    # same iteration, different operation order inside the gradient step
    assert np.max(np.abs(np.array(res.traces[0].iterates) - np.array(ref.iterates))) < 1e-12


def test_oracle_rejects_bad_input():
    with pytest.raises(ParameterError):
        oracle_adaptive_pgd([], [])
    inst = random_instance(10, 20, 2, 0)
    with pytest.raises(ParameterError):
        oracle_adaptive_pgd([inst], [0])


def test_trace_csv(tmp_path):
    inst = random_instance(10, 20, 2, 0)
    tr = pgd_solve(inst, Constraint("l0_ball", 2), 0.05, 3)
    tr.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iter,objective,error_vs_truth" and len(lines) == 5

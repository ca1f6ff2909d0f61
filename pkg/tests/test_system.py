import numpy as np
import pytest

from conformal_smpc.exceptions import DimensionError, StabilityError
from conformal_smpc.system import (CostSpec, LtiSystem, check_schur, measure, step_nominal,
                                   step_observer, step_plant)

from conftest import PEND_A, PEND_B


def test_schur_zero_matrix():
    rep = check_schur(np.zeros((3, 3)))
    assert rep.spectral_radius == 0.0 and rep.stable


def test_schur_pendulum_open_loop():
    # trace 1.95, det 0.875: eigenvalues 1.25 and 0.70
    rep = check_schur(PEND_A)
    assert rep.spectral_radius == pytest.approx(1.25, abs=1e-12)
    assert not rep.stable


def test_schur_identity_is_boundary():
    assert not check_schur(np.eye(2)).stable


def test_schur_margin():
    M = np.diag([1 - 1e-10, 0.2])
    assert not check_schur(M).stable
    assert check_schur(M, margin=0.0).stable


def test_schur_rejects_non_square():
    with pytest.raises(DimensionError):
        check_schur(np.zeros((2, 3)))


def test_unstable_gain_rejected():
    with pytest.raises(StabilityError):
        LtiSystem(PEND_A, PEND_B, np.zeros((1, 2)))


def test_unstable_observer_rejected(pendulum):
    with pytest.raises(StabilityError):
        LtiSystem(PEND_A, PEND_B, pendulum.K, [[1.0, 0.0]], None, np.zeros((2, 1)))


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        LtiSystem(PEND_A, np.zeros((3, 1)), np.zeros((1, 2)))
    with pytest.raises(DimensionError):
        LtiSystem(PEND_A, PEND_B, np.zeros((1, 3)))


def test_step_plant_examples(pendulum):
    ident = LtiSystem(0.5 * np.eye(2), np.zeros((2, 1)), np.zeros((1, 2)))
    x0 = np.array([0.3, -0.2])
    # A = I with B = 0 fails the Schur gate, so a scaled identity stands in
    assert np.allclose(step_plant(ident, x0, [7.0], np.zeros(2)), 0.5 * x0)
    assert np.allclose(step_plant(pendulum, [0, 0], [1.0], [0, 0]), [0.0, 0.1])
    zero = LtiSystem(np.zeros((2, 2)), np.zeros((2, 1)), np.zeros((1, 2)))
    w0 = np.array([0.4, 0.9])
    assert np.array_equal(step_plant(zero, [5, 5], [3.0], w0), w0)


def test_step_plant_dimension_error(pendulum):
    with pytest.raises(DimensionError):
        step_plant(pendulum, [0, 0, 0], [1.0], [0, 0])


def test_step_observer_examples(pendulum):
    xh, u = np.array([0.2, -0.1]), np.array([0.5])
    y = measure(pendulum, xh, u, np.zeros(1))
    assert np.allclose(step_observer(pendulum, xh, u, y), PEND_A @ xh + PEND_B @ u)
    scalar = LtiSystem([[0.5]], [[0.0]], [[0.0]], [[1.0]], [[0.0]], [[0.1]])
    assert step_observer(scalar, [1.0], [0.0], [2.0]) == pytest.approx([0.6])


def test_observer_disabled_ignores_measurement():
    sys_ = LtiSystem([[0.5]], [[1.0]], [[0.0]], [[1.0]], None, [[0.0]])
    a = step_observer(sys_, [1.0], [0.3], [100.0])
    b = step_observer(sys_, [1.0], [0.3], [-4.0])
    assert np.array_equal(a, b) and a == pytest.approx([0.8])


def test_plant_superposition(pendulum, rng):
    x1, x2 = rng.normal(size=2), rng.normal(size=2)
    u1, u2 = rng.normal(size=1), rng.normal(size=1)
    w1 = rng.normal(size=2)
    lhs = step_plant(pendulum, x1 + x2, u1 + u2, w1)
    rhs = step_plant(pendulum, x1, u1, w1) + step_plant(pendulum, x2, u2, np.zeros(2))
    assert np.allclose(lhs, rhs, atol=1e-14)


def test_error_decays_under_feedback(pendulum):
    e0 = np.array([0.7, -0.4])
    e = e0.copy()
    for _ in range(50):
        e = pendulum.A_K @ e
    assert np.linalg.norm(e) < np.linalg.norm(e0)


def test_error_decomposition_identity(pendulum, rng):
    x, z = np.array([0.5, -0.3]), np.array([0.4, -0.2])
    for _ in range(30):
        v, w = rng.normal(size=1), 0.01 * rng.normal(size=2)
        u = pendulum.K @ (x - z) + v
        x_next, z_next = step_plant(pendulum, x, u, w), step_nominal(pendulum, z, v)
        assert np.allclose(x_next - z_next, pendulum.A_K @ (x - z) + w, atol=1e-12)
        x, z = x_next, z_next


def test_cost_spec_validation():
    CostSpec(np.eye(2), [[1.0]])
    with pytest.raises(DimensionError):
        CostSpec(np.eye(2), [[0.0]])
    with pytest.raises(DimensionError):
        CostSpec([[1.0, 2.0], [0.0, 1.0]], [[1.0]])
    with pytest.raises(DimensionError):
        CostSpec(np.diag([1.0, -1.0]), [[1.0]])


def test_stage_cost():
    c = CostSpec(100 * np.eye(2), [[10.0]])
    assert c.stage([0.1, -0.2], [0.5]) == pytest.approx(100 * 0.05 + 2.5)
    assert c.terminal([3.0, 4.0]) == 0.0

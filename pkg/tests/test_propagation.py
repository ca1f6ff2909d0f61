import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_smpc.data import TrajectoryDataset
from conformal_smpc.exceptions import AlignmentError, DimensionError
from conformal_smpc.propagation import (output_error_recursion, propagate_output_errors,
                                        propagate_state_errors)
from conformal_smpc.system import LtiSystem, step_nominal, step_observer, step_plant

from conftest import power_sum_oracle, random_stable_system


def scalar_system(a, l=None):
    if l is None:
        return LtiSystem([[a]], [[0.0]], [[0.0]])
    return LtiSystem([[a]], [[0.0]], [[0.0]], [[1.0]], [[0.0]], [[l]])


def W(samples, role="disturbance"):
    return TrajectoryDataset(role, np.asarray(samples, dtype=float))


def test_zero_forcing_gives_zero_errors(pendulum):
    E = propagate_state_errors(pendulum, W(np.zeros((3, 8, 2))))
    assert np.all(E.combined == 0)


def test_scalar_hand_example():
    E = propagate_state_errors(scalar_system(0.5), W(np.ones((1, 3, 1))))
    assert E.combined[0, :, 0] == pytest.approx([1.0, 1.5, 1.75])


def test_first_error_is_first_disturbance(pendulum, rng):
    w = rng.normal(size=(5, 4, 2))
    E = propagate_state_errors(pendulum, W(w))
    assert np.array_equal(E.combined[:, 0], w[:, 0])


def test_recursion_matches_power_sum_2x2(rng):
    for _ in range(10):
        sys_ = random_stable_system(rng, 2)
        w = rng.normal(size=(1, 10, 2))
        E = propagate_state_errors(sys_, W(w))
        assert np.abs(E.combined[0] - power_sum_oracle(sys_.A_K, w[0])).max() < 1e-12


def test_horizon_argument(pendulum, rng):
    w = rng.normal(size=(2, 10, 2))
    assert propagate_state_errors(pendulum, W(w), horizon=4).combined.shape == (2, 4, 2)
    with pytest.raises(DimensionError):
        propagate_state_errors(pendulum, W(w), horizon=11)


def test_wrong_role_or_dimension(pendulum):
    with pytest.raises(DimensionError):
        propagate_state_errors(pendulum, W(np.zeros((1, 2, 2)), role="noise"))
    with pytest.raises(DimensionError):
        propagate_state_errors(pendulum, W(np.zeros((1, 2, 3))))


def test_output_errors_zero(pendulum):
    E = propagate_output_errors(pendulum, W(np.zeros((2, 5, 2))), W(np.zeros((2, 5, 1)), "noise"))
    assert np.all(E.estimation_errors.samples == 0) and np.all(E.nominal_errors.samples == 0)


def test_output_errors_scalar_hand_example():
    sys_ = scalar_system(0.5, 0.2)
    E = propagate_output_errors(sys_, W([[[1.0], [0.0]]]), W([[[1.0], [0.0]]], "noise"))
    assert E.estimation_errors.samples[0, :, 0] == pytest.approx([0.8, 0.24])
    assert E.nominal_errors.samples[0, :, 0] == pytest.approx([0.2, 0.26])
    assert E.combined[0, :, 0] == pytest.approx([1.0, 0.5])


def test_observer_off_reduces_to_state_errors(rng):
    sys_ = LtiSystem([[0.6, 0.1], [0.0, 0.5]], [[0.0], [1.0]], [[0.0, 0.0]],
                     [[1.0, 0.0]], None, np.zeros((2, 1)))
    w = rng.normal(size=(3, 6, 2))
    eta = rng.normal(size=(3, 6, 1))
    E = propagate_output_errors(sys_, W(w), W(eta, "noise"))
    ref = propagate_state_errors(sys_, W(w)).combined
    assert np.allclose(E.estimation_errors.samples, ref, atol=1e-14)
    assert np.all(E.nominal_errors.samples == 0)


def test_misaligned_output_data(pendulum):
    with pytest.raises(AlignmentError):
        propagate_output_errors(pendulum, W(np.zeros((3, 5, 2))), W(np.zeros((2, 5, 1)), "noise"))
    with pytest.raises(AlignmentError):
        propagate_output_errors(pendulum, W(np.zeros((2, 5, 2))), W(np.zeros((2, 4, 1)), "noise"))


def test_pathwise_state_feedback_identity(pendulum, rng):
    T = 25
    w = 0.05 * rng.normal(size=(T, 2))
    e = propagate_state_errors(pendulum, W(w[None])).combined[0]
    x, z = np.array([0.3, 0.1]), np.array([0.3, 0.1])
    for t in range(T):
        v = rng.normal(size=1)
        u = pendulum.K @ (x - z) + v
        x, z = step_plant(pendulum, x, u, w[t]), step_nominal(pendulum, z, v)
        assert np.abs((x - z) - e[t]).max() < 1e-10


def test_pathwise_output_feedback_identity(pendulum, rng):
    T = 25
    w = 0.05 * rng.normal(size=(T, 2))
    eta = 0.05 * rng.normal(size=(T, 1))
    ehat, ebar = output_error_recursion(pendulum, w[None], eta[None])
    x = np.array([0.2, -0.1])
    xhat, z = x.copy(), x.copy()
    for t in range(T):
        v = rng.normal(size=1)
        u = pendulum.K @ (xhat - z) + v
        y = pendulum.C @ x + pendulum.D @ u + eta[t]
        x, xhat, z = (step_plant(pendulum, x, u, w[t]), step_observer(pendulum, xhat, u, y),
                      step_nominal(pendulum, z, v))
        assert np.abs((x - xhat) - ehat[0, t]).max() < 1e-10
        assert np.abs((xhat - z) - ebar[0, t]).max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    sys_ = random_stable_system(rng, 3)
    w = rng.normal(size=(6, 5, 3))
    perm = rng.permutation(6)
    a = propagate_state_errors(sys_, W(w)).combined
    b = propagate_state_errors(sys_, W(w[perm])).combined
    assert np.array_equal(a[perm], b)

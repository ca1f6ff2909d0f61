import numpy as np
import pytest

from conformal_smpc.config import reference_config
from conformal_smpc.system import LtiSystem

PEND_A = np.array([[1.0, 0.1], [0.75, 0.95]])
PEND_B = np.array([[0.0], [0.1]])
PEND_C = np.array([[1.0, 0.0]])


def power_sum_oracle(A_K, w):
    """e(t) = sum_{i<t} A_K^(t-1-i) w(i), evaluated term by term."""
    T, n = w.shape
    out = np.zeros((T, n))
    for t in range(1, T + 1):
        acc = np.zeros(n)
        for i in range(t):
            acc = acc + np.linalg.matrix_power(A_K, t - 1 - i) @ w[i]
        out[t - 1] = acc
    return out


def random_stable_system(rng, nx, nu=1, radius=0.9):
    """A random (A, B, K) whose A + BK has spectral radius ``radius``."""
    A = rng.normal(size=(nx, nx))
    B = rng.normal(size=(nx, nu))
    K = np.zeros((nu, nx))
    AK = A + B @ K
    rho = max(abs(np.linalg.eigvals(AK)))
    A = A * (radius / rho)
    return LtiSystem(A, B, K)


@pytest.fixture
def pendulum():
    ref = reference_config()["system"]
    return LtiSystem(ref["A"], ref["B"], ref["K"], ref["C"], ref["D"], ref["L"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL = {"horizon.N": 8, "horizon.N_bar": 12, "horizon.S": 10, "data.M": 150,
         "data.split.n_fit": 50, "data.split.n_cal": 100, "evaluation.x0": [0.3, -0.2],
         "evaluation.n_test": 8}


def small_run_config(**overrides):
    """Reference plant and noise with short horizons, for fast controller tests."""
    from conformal_smpc.config import validate
    return validate(reference_config()).with_overrides(**{**SMALL, **overrides})


@pytest.fixture(scope="session")
def small_state():
    from conformal_smpc import pipeline
    return pipeline.build_experiment(small_run_config(), "state_feedback")


@pytest.fixture(scope="session")
def small_output():
    from conformal_smpc import pipeline
    return pipeline.build_experiment(small_run_config(), "output_feedback")


ACCEPTANCE = {}


def record_acceptance(number, ok, detail):
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])

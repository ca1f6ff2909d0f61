import numpy as np
import pytest

from conformal_smpc.exceptions import QpInputError
from conformal_smpc.qp import QuadraticProgram, kkt_residuals, solve

cp = pytest.importorskip("cvxpy")


def random_qp(rng, trial):
    n = int(rng.integers(2, 15))
    me = int(rng.integers(0, n // 2 + 1))
    mi = int(rng.integers(1, 3 * n))
    M = rng.normal(size=(n, n))
    # every third problem has a rank-deficient H
    H = M @ M.T if trial % 3 else M[:, :n // 2] @ M[:, :n // 2].T
    x = rng.uniform(-1, 1, size=n)
    Ae, Ai = rng.normal(size=(me, n)), rng.normal(size=(mi, n))
    Ai = np.vstack([Ai, np.eye(n), -np.eye(n)])
    bi = np.concatenate([Ai[:mi] @ x + rng.uniform(0, 1, mi), 5 * np.ones(2 * n)])
    return QuadraticProgram(H, rng.normal(size=n), Ae, Ae @ x, Ai, bi), x


def test_single_active_constraint():
    sol = solve(QuadraticProgram([[2.0]], [0.0], A_in=[[-1.0]], b_in=[-1.0]))
    assert sol.optimal
    assert sol.x[0] == pytest.approx(1.0) and sol.objective == pytest.approx(1.0)


def test_equality_by_hand():
    sol = solve(QuadraticProgram(np.eye(2), [0.0, 0.0], A_eq=[[1.0, 1.0]], b_eq=[1.0]))
    assert np.allclose(sol.x, [0.5, 0.5], atol=1e-12)
    assert sol.y_eq[0] == pytest.approx(-0.5)


def test_infeasible_interval():
    sol = solve(QuadraticProgram([[2.0]], [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0]))
    assert sol.status == "infeasible"
    assert sol.certificate["max_min_slack"] < 0


def test_inconsistent_equalities():
    qp = QuadraticProgram(np.eye(2), [0, 0], A_eq=[[1.0, 1.0], [1.0, 1.0]], b_eq=[0.0, 1.0])
    sol = solve(qp)
    assert sol.status == "infeasible" and "equality_residual" in sol.certificate


def test_infeasible_after_elimination():
    qp = QuadraticProgram(np.eye(2), [0, 0], A_eq=[[1.0, 0.0]], b_eq=[2.0],
                          A_in=[[1.0, 0.0]], b_in=[1.0])
    assert solve(qp).status == "infeasible"


def test_input_errors():
    with pytest.raises(QpInputError):
        QuadraticProgram([[1.0, 2.0], [0.0, 1.0]], [0, 0])
    with pytest.raises(QpInputError):
        QuadraticProgram(np.eye(2), [0.0])
    with pytest.raises(QpInputError):
        QuadraticProgram(np.eye(2), [0, 0], A_in=[[1.0, 0.0]], b_in=[1.0, 2.0])
    with pytest.raises(QpInputError, match="semidefinite|PSD"):
        solve(QuadraticProgram(np.diag([1.0, -1.0]), [0, 0]))


def test_random_problems_against_cvxpy():
    rng = np.random.default_rng(1)
    for trial in range(100):
        qp, _ = random_qp(rng, trial)
        sol = solve(qp)
        X = cp.Variable(qp.n)
        cons = [qp.A_in @ X <= qp.b_in]
        if qp.A_eq.shape[0]:
            cons.append(qp.A_eq @ X == qp.b_eq)
        ref = cp.Problem(cp.Minimize(0.5 * cp.quad_form(X, cp.psd_wrap(qp.H)) + qp.g @ X),
                         cons)
        ref.solve()
        assert sol.optimal, trial
        assert sol.objective <= ref.value + 1e-6 * max(1.0, abs(ref.value)), trial


def test_independent_kkt_check():
    rng = np.random.default_rng(2)
    for trial in range(50):
        qp, _ = random_qp(rng, trial)
        sol = solve(qp)
        eq, ineq, stat, comp = kkt_residuals(qp, sol.x, sol.y_eq, sol.y_in)
        assert eq <= 1e-8 and ineq <= 1e-8 and stat <= 1e-6 and comp <= 1e-6
        assert np.all(sol.y_in >= 0)


def test_objective_soundness():
    rng = np.random.default_rng(3)
    for trial in range(50):
        qp, x_feas = random_qp(rng, trial)
        sol = solve(qp)
        assert sol.objective <= qp.objective(x_feas) + 1e-6


def test_deterministic_and_warm_start():
    qp, x_feas = random_qp(np.random.default_rng(4), 1)
    a, b = solve(qp), solve(qp)
    assert np.array_equal(a.x, b.x) and a.iterations == b.iterations
    warm = solve(qp, x0=x_feas)
    assert warm.optimal and warm.objective == pytest.approx(a.objective, abs=1e-8)


def test_factorization_cache_reuse():
    qp, _ = random_qp(np.random.default_rng(5), 1)
    cache = {}
    first = solve(qp, cache=cache)
    qp.g = qp.g + 0.1
    again = solve(qp, cache=cache)
    fresh = solve(qp)
    assert first.optimal and np.allclose(again.x, fresh.x, atol=1e-9)


def test_iteration_cap_is_a_status():
    qp, _ = random_qp(np.random.default_rng(6), 1)
    sol = solve(qp, max_iterations=1)
    assert sol.status == "max_iterations" and sol.iterations == 1
    assert sol.x is not None


def test_dump(tmp_path):
    qp = QuadraticProgram(np.eye(2), [1.0, 2.0], A_in=[[1.0, 0.0]], b_in=[1.0])
    qp.dump(tmp_path / "qp.txt")
    text = (tmp_path / "qp.txt").read_text()
    assert "# H 2 2" in text and "# b_in 1 1" in text

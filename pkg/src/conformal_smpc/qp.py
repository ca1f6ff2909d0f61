"""Dense convex QP solver.

    minimize    1/2 xi' H xi + g' xi + c
    subject to  A_eq xi = b_eq,  A_in xi <= b_in

Equalities are eliminated with a null-space basis; the reduced problem is
solved by a primal active-set method. A starting point is either supplied
(the controllers pass the shifted previous solution, which is feasible by
construction) or obtained from a max-slack phase-1 LP, whose optimum also
serves as the infeasibility certificate.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .exceptions import QpInputError

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITERATIONS = "max_iterations"
UNBOUNDED = "unbounded"


@dataclass
class QuadraticProgram:
    H: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    c: float = 0.0

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise QpInputError(f"H must be square, got {self.H.shape}")
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        if self.g.shape != (n,):
            raise QpInputError(f"g must have length {n}")
        self.A_eq, self.b_eq = self._pair(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = self._pair(self.A_in, self.b_in, n, "inequality")
        scale = max(1.0, np.abs(self.H).max(initial=0.0))
        if not np.allclose(self.H, self.H.T, rtol=0, atol=1e-10 * scale):
            raise QpInputError("H must be symmetric")

    @staticmethod
    def _pair(A, b, n, what):
        if A is None:
            return np.zeros((0, n)), np.zeros(0)
        A = np.asarray(A, dtype=float).reshape(-1, n)
        b = np.asarray(b, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise QpInputError(f"{what} system has {A.shape[0]} rows but {b.shape[0]} offsets")
        return A, b

    @property
    def n(self):
        return self.H.shape[0]

    def objective(self, xi):
        xi = np.asarray(xi, dtype=float)
        return float(0.5 * xi @ self.H @ xi + self.g @ xi + self.c)

    def dump(self, path):
        """Plain-text dump for cross-checking with external solvers."""
        with open(path, "w") as f:
            for name in ("H", "g", "A_eq", "b_eq", "A_in", "b_in"):
                arr = np.atleast_2d(getattr(self, name))
                f.write(f"# {name} {arr.shape[0]} {arr.shape[1]}\n")
                np.savetxt(f, arr, fmt="%.17g")
            f.write(f"# c\n{self.c:.17g}\n")


@dataclass
class QpSolution:
    x: Optional[np.ndarray]
    objective: float
    status: str
    iterations: int
    eq_residual: float = np.inf
    in_residual: float = np.inf
    stationarity: float = np.inf
    y_eq: Optional[np.ndarray] = None
    y_in: Optional[np.ndarray] = None
    active: tuple = ()
    certificate: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == OPTIMAL


def kkt_residuals(qp: QuadraticProgram, x, y_eq, y_in):
    """(equality, inequality, stationarity, complementarity) residuals, max-norm."""
    eq = np.abs(qp.A_eq @ x - qp.b_eq).max(initial=0.0)
    slack = qp.b_in - qp.A_in @ x
    ineq = max(0.0, -slack.min(initial=np.inf))
    grad = qp.H @ x + qp.g + qp.A_eq.T @ y_eq + qp.A_in.T @ y_in
    stat = np.abs(grad).max(initial=0.0)
    comp = np.abs(y_in * slack).max(initial=0.0)
    return eq, ineq, stat, comp


class _Basis:
    """Incremental orthonormal basis used to keep working-set rows independent."""

    def __init__(self, n):
        self.Q = np.zeros((0, n))

    def try_add(self, row, tol=1e-9):
        r = row - self.Q.T @ (self.Q @ row)
        norm = np.linalg.norm(r)
        if norm <= tol * max(1.0, np.linalg.norm(row)):
            return False
        self.Q = np.vstack([self.Q, r / norm])
        return True


def _phase_one(G, h):
    """max s s.t. G y + s |G_i| <= h, s <= 1. Returns (y, s*) or (None, s*)."""
    m, n = G.shape
    norms = np.linalg.norm(G, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.hstack([G, norms[:, None]]), b_ub=h,
                  bounds=[(None, None)] * n + [(None, 1.0)], method="highs")
    if res.status == 0:
        return res.x[:n], float(res.x[-1])
    if res.status == 2:
        return None, -np.inf
    raise RuntimeError(f"phase-1 LP failed: {res.message}")


def _factorize(qp: QuadraticProgram):
    """Parts of the solve that depend only on H and A_eq."""
    H, n = qp.H, qp.n
    scale = max(1.0, np.abs(H).max(initial=0.0))
    if n and np.linalg.eigvalsh(H).min() < -1e-9 * scale:
        raise QpInputError("H is not positive semidefinite")
    if qp.A_eq.shape[0]:
        U, s, Vt = np.linalg.svd(qp.A_eq, full_matrices=True)
        rank = int(np.sum(s > 1e-12 * max(1.0, s.max(initial=0.0))))
        U, s, Z, Vr = U[:, :rank], s[:rank], Vt[rank:].T, Vt[:rank]
    else:
        U, s, Z, Vr = None, None, np.eye(n), None
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    chol = None
    if Z.shape[1] and np.linalg.eigvalsh(Hr).min() > 1e-10 * scale:
        chol = sla.cho_factor(Hr)
    return {"U": U, "s": s, "Vr": Vr, "Z": Z, "Hr": Hr, "chol": chol,
            "shape": (qp.H.shape, qp.A_eq.shape)}


def solve(qp: QuadraticProgram, x0=None, tol_eq=1e-8, tol_in=1e-8, tol_stat=1e-6,
          max_iterations=1000, cache: Optional[dict] = None) -> QpSolution:
    """Solve ``qp``.

    ``cache`` is a caller-owned dict reused across problems that share H and
    A_eq (e.g. successive MPC steps); it stores the factorizations.
    """
    H, g, n = qp.H, qp.g, qp.n
    if cache is not None and cache.get("shape") == (qp.H.shape, qp.A_eq.shape):
        fac = cache
    else:
        fac = _factorize(qp)
        if cache is not None:
            cache.clear()
            cache.update(fac)

    # eliminate equalities: xi = xp + Z y
    Z = fac["Z"]
    if qp.A_eq.shape[0]:
        U, s, Vr = fac["U"], fac["s"], fac["Vr"]
        xp = Vr.T @ ((U.T @ qp.b_eq) / s)
        eq_gap = np.abs(qp.A_eq @ xp - qp.b_eq).max()
        if eq_gap > tol_eq:
            return QpSolution(None, np.inf, INFEASIBLE, 0,
                              certificate={"equality_residual": float(eq_gap)})
    else:
        xp, Z = np.zeros(n), np.eye(n)
    nr = Z.shape[1]
    Hr = fac["Hr"]
    gr = Z.T @ (H @ xp + g)
    G_all = qp.A_in @ Z
    h_all = qp.b_in - qp.A_in @ xp
    row_norms = np.linalg.norm(G_all, axis=1)
    keep = row_norms > 1e-12 * max(1.0, np.abs(qp.A_in).max(initial=0.0))
    fixed_gap = -h_all[~keep].min(initial=np.inf)
    if fixed_gap > tol_in:
        return QpSolution(None, np.inf, INFEASIBLE, 0,
                          certificate={"fixed_constraint_violation": float(fixed_gap)})
    rows = np.flatnonzero(keep)
    G, h, gnorm = G_all[rows], h_all[rows], row_norms[rows]

    y = None
    if x0 is not None:
        y = Z.T @ (np.asarray(x0, dtype=float) - xp)
        if np.any(G @ y - h > tol_in * np.maximum(1.0, gnorm)):
            y = None
    hr_chol = fac["chol"]
    positive_definite = hr_chol is not None
    if y is None and positive_definite and nr:
        y_free = -sla.cho_solve(hr_chol, gr)
        if np.all(G @ y_free <= h):
            y = y_free
    if y is None:
        y, s_star = _phase_one(G, h) if len(rows) else (np.zeros(nr), np.inf)
        if y is None or s_star < -tol_in:
            return QpSolution(None, np.inf, INFEASIBLE, 0,
                              certificate={"max_min_slack": float(s_star)})

    status, iterations, W, lam = _active_set(Hr, gr, G, h, gnorm, y, positive_definite,
                                             max_iterations, hr_chol)
    y = W.pop("y")
    x = xp + Z @ y
    y_in = np.zeros(qp.A_in.shape[0])
    if lam is not None:
        y_in[rows[W["set"]]] = lam
    resid = H @ x + g + qp.A_in.T @ y_in
    if qp.A_eq.shape[0]:
        y_eq = -fac["U"] @ ((fac["Vr"] @ resid) / fac["s"])
    else:
        y_eq = np.zeros(0)
    eq, ineq, stat, comp = kkt_residuals(qp, x, y_eq, y_in)
    sol = QpSolution(x, qp.objective(x), status, iterations, eq, ineq, stat, y_eq, y_in,
                     tuple(int(i) for i in rows[W["set"]]))
    if status == OPTIMAL and (eq > tol_eq or ineq > tol_in or stat > tol_stat):
        log.warning("QP residuals above tolerance: eq=%.2e in=%.2e stat=%.2e", eq, ineq, stat)
        sol.status = MAX_ITERATIONS
    return sol


def _active_set(Hr, gr, G, h, gnorm, y, positive_definite, max_iterations, hr_chol):
    nr = Hr.shape[0]
    basis = _Basis(nr)
    W = []
    slack = h - G @ y
    for i in np.argsort(slack / gnorm):
        if slack[i] > 1e-9 * gnorm[i]:
            break
        if basis.try_add(G[i]):
            W.append(int(i))
    in_W = np.zeros(len(h), dtype=bool)
    in_W[W] = True
    grad_scale = max(1.0, np.abs(gr).max(initial=0.0), np.abs(Hr).max(initial=0.0))
    lam = None
    for it in range(1, max_iterations + 1):
        grad = Hr @ y + gr
        p, lam, unbounded = _eqp(Hr, grad, G[W], positive_definite)
        if not unbounded and np.linalg.norm(p) <= 1e-12 * max(1.0, np.linalg.norm(y)):
            if not W or lam.min() >= -1e-9 * grad_scale:
                return "optimal", it, {"set": W, "y": y}, lam
            drop = int(np.argmin(lam))
            in_W[W[drop]] = False
            del W[drop]
            basis = _Basis(nr)
            for i in W:
                basis.try_add(G[i])
            continue
        Gp = G @ p
        candidates = np.flatnonzero(~in_W & (Gp > 1e-14 * np.maximum(gnorm, 1.0) * np.linalg.norm(p)))
        alpha, block = (np.inf if unbounded else 1.0), None
        if candidates.size:
            ratios = np.maximum((h[candidates] - G[candidates] @ y) / Gp[candidates], 0.0)
            j = int(np.argmin(ratios))
            if ratios[j] < alpha:
                alpha, block = ratios[j], int(candidates[j])
        if not np.isfinite(alpha):
            return UNBOUNDED, it, {"set": W, "y": y}, None
        y = y + alpha * p
        if block is not None:
            W.append(block)
            in_W[block] = True
            basis.try_add(G[block])
    return MAX_ITERATIONS, max_iterations, {"set": W, "y": y}, None


def _eqp(Hr, grad, GW, positive_definite):
    """Step p of min 1/2 p'Hr p + grad'p s.t. GW p = 0, with multipliers.

    Returns (p, multipliers, unbounded_direction).
    """
    nr, m = Hr.shape[0], GW.shape[0]
    if positive_definite:
        K = np.zeros((nr + m, nr + m))
        K[:nr, :nr] = Hr
        K[:nr, nr:] = GW.T
        K[nr:, :nr] = GW
        rhs = np.concatenate([-grad, np.zeros(m)])
        sol = np.linalg.solve(K, rhs)
        return sol[:nr], sol[nr:], False
    N = sla.null_space(GW) if m else np.eye(nr)
    if N.shape[1] == 0:
        p = np.zeros(nr)
    else:
        Hn = N.T @ Hr @ N
        evals, V = np.linalg.eigh(0.5 * (Hn + Hn.T))
        gn = N.T @ grad
        tiny = 1e-10 * max(1.0, np.abs(evals).max(initial=0.0))
        flat = evals <= tiny
        gflat = V[:, flat].T @ gn
        if flat.any() and np.linalg.norm(gflat) > 1e-10 * max(1.0, np.linalg.norm(gn)):
            return -N @ (V[:, flat] @ gflat), None, True
        q = -V[:, ~flat] @ ((V[:, ~flat].T @ gn) / evals[~flat])
        p = N @ q
    lam = (np.linalg.lstsq(GW.T, -(Hr @ p + grad), rcond=None)[0] if m else np.zeros(0))
    return p, lam, False

"""Linear time-invariant plant, nominal and observer dynamics."""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import DimensionError, StabilityError

SCHUR_MARGIN = 1e-9


def _matrix(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got shape {M.shape}")
    return M


class SchurReport(NamedTuple):
    spectral_radius: float
    stable: bool


def check_schur(M, margin=SCHUR_MARGIN) -> SchurReport:
    """Spectral radius of ``M`` and whether it is strictly below ``1 - margin``."""
    M = _matrix(M, "M")
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"Schur check needs a square matrix, got {M.shape}")
    radius = float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0
    return SchurReport(radius, radius < 1.0 - margin)


@dataclass(frozen=True)
class LtiSystem:
    """x+ = A x + B u + w,  y = C x + D u + eta, with tube gain K and observer gain L.

    The feedback convention is u = K e + v, so the error matrix is A + B K.
    """

    A: np.ndarray
    B: np.ndarray
    K: np.ndarray
    C: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    L: Optional[np.ndarray] = None
    margin: float = SCHUR_MARGIN
    require_observer: bool = False

    def __post_init__(self):
        A = _matrix(self.A, "A")
        B = _matrix(self.B, "B")
        K = _matrix(self.K, "K")
        nx, nu = A.shape[0], B.shape[1]
        if A.shape != (nx, nx):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != nx:
            raise DimensionError(f"B has {B.shape[0]} rows, expected {nx}")
        if K.shape != (nu, nx):
            raise DimensionError(f"K must be {nu}x{nx}, got {K.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "K", K)
        report = check_schur(A + B @ K, self.margin)
        if not report.stable:
            raise StabilityError(
                f"A + BK is not Schur (spectral radius {report.spectral_radius:.6g})")

        if self.C is not None:
            C = _matrix(self.C, "C")
            if C.shape[1] != nx:
                raise DimensionError(f"C must have {nx} columns, got {C.shape}")
            ny = C.shape[0]
            D = np.zeros((ny, nu)) if self.D is None else _matrix(self.D, "D")
            if D.shape != (ny, nu):
                raise DimensionError(f"D must be {ny}x{nu}, got {D.shape}")
            object.__setattr__(self, "C", C)
            object.__setattr__(self, "D", D)
            if self.L is not None:
                L = _matrix(self.L, "L")
                if L.shape != (nx, ny):
                    raise DimensionError(f"L must be {nx}x{ny}, got {L.shape}")
                object.__setattr__(self, "L", L)
                report = check_schur(A - L @ C, self.margin)
                if not report.stable:
                    raise StabilityError(
                        f"A - LC is not Schur (spectral radius {report.spectral_radius:.6g})")
        elif self.L is not None or self.D is not None:
            raise DimensionError("L and D require an output matrix C")
        if self.require_observer and not self.has_observer:
            raise DimensionError("output feedback requires C and L")

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    @property
    def ny(self):
        return 0 if self.C is None else self.C.shape[0]

    @property
    def has_observer(self):
        return self.C is not None and self.L is not None

    @property
    def A_K(self):
        return self.A + self.B @ self.K

    @property
    def A_L(self):
        if not self.has_observer:
            raise DimensionError("system has no observer")
        return self.A - self.L @ self.C


@dataclass(frozen=True)
class CostSpec:
    """Stage cost |x|_Q^2 + |u|_R^2 and terminal cost |x|_Pf^2."""

    Q: np.ndarray
    R: np.ndarray
    P_f: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        Q = _matrix(self.Q, "Q")
        R = _matrix(self.R, "R")
        P_f = np.zeros_like(Q) if self.P_f is None else _matrix(self.P_f, "P_f")
        for name, M in (("Q", Q), ("R", R), ("P_f", P_f)):
            if M.shape[0] != M.shape[1]:
                raise DimensionError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise DimensionError(f"{name} must be symmetric")
        if P_f.shape != Q.shape:
            raise DimensionError("P_f must match Q")
        if np.linalg.eigvalsh(Q).min() < -1e-12 or np.linalg.eigvalsh(P_f).min() < -1e-12:
            raise DimensionError("Q and P_f must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise DimensionError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P_f", P_f)

    def stage(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return float(x @ self.Q @ x + u @ self.R @ u)

    def terminal(self, x):
        x = np.asarray(x, float)
        return float(x @ self.P_f @ x)


def _vector(v, n, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (n,):
        raise DimensionError(f"{name} must have length {n}, got {v.shape}")
    return v


def step_plant(sys: LtiSystem, x, u, w):
    """One step of the true plant, A x + B u + w."""
    x = _vector(x, sys.nx, "x")
    u = _vector(u, sys.nu, "u")
    w = _vector(w, sys.nx, "w")
    return sys.A @ x + sys.B @ u + w


def step_nominal(sys: LtiSystem, z, v):
    z = _vector(z, sys.nx, "z")
    v = _vector(v, sys.nu, "v")
    return sys.A @ z + sys.B @ v


def measure(sys: LtiSystem, x, u, eta):
    """Output C x + D u + eta."""
    if sys.C is None:
        raise DimensionError("system has no output matrix")
    x = _vector(x, sys.nx, "x")
    u = _vector(u, sys.nu, "u")
    eta = _vector(eta, sys.ny, "eta")
    return sys.C @ x + sys.D @ u + eta


def step_observer(sys: LtiSystem, xhat, u, y):
    """Luenberger update A xhat + B u + L (y - C xhat - D u)."""
    if not sys.has_observer:
        raise DimensionError("system has no observer")
    xhat = _vector(xhat, sys.nx, "xhat")
    u = _vector(u, sys.nu, "u")
    y = _vector(y, sys.ny, "y")
    innovation = y - sys.C @ xhat - sys.D @ u
    return sys.A @ xhat + sys.B @ u + sys.L @ innovation

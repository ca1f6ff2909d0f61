"""Halfspace polytopes, ellipsoids and Pontryagin-difference tightening.

Everything stays in H-representation; the tightening of a polytope by an
ellipsoid only needs the ellipsoid's support function, so degenerate
(singular-shape) ellipsoids never get inverted.
"""
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .exceptions import DimensionError, SmpcError


class HalfspacePolytope:
    """{x : a_i^T x <= b_i} with unit-length normals."""

    def __init__(self, normals, offsets, names: Optional[Sequence[str]] = None,
                 normalize=True):
        A = np.atleast_2d(np.asarray(normals, dtype=float))
        b = np.asarray(offsets, dtype=float).reshape(-1)
        if A.shape[0] != b.shape[0]:
            raise DimensionError(f"{A.shape[0]} normals but {b.shape[0]} offsets")
        if normalize:
            norms = np.linalg.norm(A, axis=1)
            if np.any(norms == 0):
                raise DimensionError("zero normal vector in halfspace description")
            A = A / norms[:, None]
            b = b / norms
        self.A = A
        self.b = b
        self.A.setflags(write=False)
        self.b.setflags(write=False)
        self.names = (tuple(names) if names is not None
                      else tuple(f"facet{i}" for i in range(len(b))))
        if len(self.names) != len(b):
            raise DimensionError("one name per facet required")
        self.empty = None
        self.chebyshev_radius = None

    @classmethod
    def box(cls, bounds, prefix="x"):
        """``bounds`` is a list of [lo, hi] per coordinate."""
        bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        n = bounds.shape[0]
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise DimensionError("box lower bound exceeds upper bound")
        eye = np.eye(n)
        A = np.vstack([eye, -eye])
        b = np.concatenate([bounds[:, 1], -bounds[:, 0]])
        names = ([f"{prefix}{i + 1}<={hi:g}" for i, hi in enumerate(bounds[:, 1])]
                 + [f"{prefix}{i + 1}>={lo:g}" for i, lo in enumerate(bounds[:, 0])])
        return cls(A, b, names)

    @property
    def dim(self):
        return self.A.shape[1]

    @property
    def n_facets(self):
        return self.A.shape[0]

    def with_offsets(self, offsets, names=None):
        P = HalfspacePolytope(self.A, offsets, names or self.names, normalize=False)
        return P

    def slack(self, x):
        """b - A x; negative entries are violated facets."""
        return self.b - self.A @ np.asarray(x, dtype=float)

    def contains(self, x, tol=0.0):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return bool(np.all(self.slack(x) >= -tol))
        return np.all(x @ self.A.T <= self.b + tol, axis=-1)

    def violated(self, x, tol=0.0):
        return [name for name, s in zip(self.names, self.slack(x)) if s < -tol]

    def contains_origin_interior(self):
        return bool(np.all(self.b > 0))

    def __repr__(self):
        return f"HalfspacePolytope(n={self.dim}, facets={self.n_facets})"


@dataclass(frozen=True)
class Ellipsoid:
    """{center + radius * Sigma^(1/2) u : |u| <= 1}; Sigma may be singular."""

    center: np.ndarray
    shape: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        S = np.atleast_2d(np.asarray(self.shape, dtype=float))
        if S.shape != (c.size, c.size):
            raise DimensionError(f"shape must be {c.size}x{c.size}, got {S.shape}")
        if self.radius < 0:
            raise DimensionError("radius must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", 0.5 * (S + S.T))
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center.size

    def linear_image(self, M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[1] != self.dim:
            raise DimensionError(f"map has {M.shape[1]} columns, ellipsoid dim {self.dim}")
        return Ellipsoid(M @ self.center, M @ self.shape @ M.T, self.radius)

    def volume_proxy(self):
        """radius^n * sqrt(det shape); proportional to the volume."""
        det = max(np.linalg.det(self.shape), 0.0)
        return self.radius ** self.dim * np.sqrt(det)

    def radius_scale(self):
        """Geometric-mean semi-axis length."""
        return self.volume_proxy() ** (1.0 / self.dim)

    def contains(self, x, tol=1e-12):
        d = np.asarray(x, dtype=float) - self.center
        if self.radius == 0:
            return bool(np.all(np.abs(d) <= tol))
        sol, *_ = np.linalg.lstsq(self.shape, d, rcond=None)
        if np.linalg.norm(self.shape @ sol - d) > tol * max(1.0, np.linalg.norm(d)):
            return False
        return bool(d @ sol <= self.radius ** 2 * (1 + tol) + tol)

    def boundary(self, n_points=64, coords=(0, 1)):
        """Closed polyline of the ellipse obtained by projecting onto two coordinates."""
        i, j = coords
        S = self.shape[np.ix_([i, j], [i, j])]
        evals, evecs = np.linalg.eigh(S)
        root = evecs * np.sqrt(np.clip(evals, 0.0, None))
        angles = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
        circle = np.stack([np.cos(angles), np.sin(angles)])
        return (self.center[[i, j]][:, None] + self.radius * root @ circle).T


def support(ell: Ellipsoid, direction):
    """max_{e in ell} a^T e = a^T mu + r sqrt(a^T Sigma a)."""
    a = np.asarray(direction, dtype=float)
    if a.shape[-1] != ell.dim:
        raise DimensionError(f"direction has length {a.shape[-1]}, ellipsoid dim {ell.dim}")
    quad = np.einsum("...i,ij,...j->...", a, ell.shape, a)
    return a @ ell.center + ell.radius * np.sqrt(np.clip(quad, 0.0, None))


def support_maximizer(ell: Ellipsoid, direction):
    """Point of ``ell`` attaining the support value in ``direction``."""
    a = np.asarray(direction, dtype=float)
    Sa = ell.shape @ a
    quad = a @ Sa
    if quad <= 0 or ell.radius == 0:
        return ell.center.copy()
    return ell.center + ell.radius * Sa / np.sqrt(quad)


class ChebyshevBall(NamedTuple):
    center: Optional[np.ndarray]
    radius: float


def chebyshev_ball(P: HalfspacePolytope, max_radius=1e6):
    """Largest inscribed ball; radius is -inf when P is empty."""
    n = P.dim
    norms = np.linalg.norm(P.A, axis=1)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([P.A, norms[:, None]])
    res = linprog(c, A_ub=A_ub, b_ub=P.b,
                  bounds=[(None, None)] * n + [(0.0, max_radius)], method="highs")
    if res.status == 2:
        return ChebyshevBall(None, -np.inf)
    if res.status != 0:
        raise SmpcError(f"Chebyshev-center LP failed: {res.message}")
    return ChebyshevBall(res.x[:n], float(res.x[-1]))


def _flag_emptiness(P):
    ball = chebyshev_ball(P)
    P.chebyshev_radius = ball.radius
    P.empty = ball.radius < 0
    return P


def tighten(P: HalfspacePolytope, ell: Ellipsoid, check_empty=True):
    """Exact Pontryagin difference P - ell: b_i' = b_i - h_ell(a_i).

    The result's ``empty`` attribute flags an empty difference instead of raising.
    """
    if P.dim != ell.dim:
        raise DimensionError(f"polytope dim {P.dim} but ellipsoid dim {ell.dim}")
    tightened = P.with_offsets(P.b - support(ell, P.A))
    return _flag_emptiness(tightened) if check_empty else tightened


def tighten_inputs(U: HalfspacePolytope, K, ell: Ellipsoid, check_empty=True):
    """U - K ell, with K ell handled through its (possibly degenerate) image."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (U.dim, ell.dim):
        raise DimensionError(f"K must be {U.dim}x{ell.dim}, got {K.shape}")
    return tighten(U, ell.linear_image(K), check_empty)


def horizon_intersection(sets: Sequence[HalfspacePolytope]):
    """Exact intersection of polytopes sharing one normal matrix."""
    if not sets:
        raise DimensionError("need at least one set")
    first = sets[0]
    for P in sets[1:]:
        if P.A.shape != first.A.shape or not np.array_equal(P.A, first.A):
            raise DimensionError("sets do not share facet normals")
    offsets = np.min(np.stack([P.b for P in sets]), axis=0)
    return first.with_offsets(offsets)


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal set and linear terminal law pi_f(z) = K_f z.

    ``kind="origin"`` is the singleton {0} with pi_f(0) = 0.
    """

    kind: str = "origin"
    polytope: Optional[HalfspacePolytope] = None
    K_f: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.kind not in ("origin", "polytope"):
            raise DimensionError(f"unknown terminal set kind {self.kind!r}")
        if self.kind == "polytope" and (self.polytope is None or self.K_f is None):
            raise DimensionError("polytopic terminal set needs a polytope and K_f")

    def law(self, z):
        if self.kind == "origin":
            return None
        return np.atleast_2d(self.K_f) @ z


class InvarianceReport(NamedTuple):
    invariant: bool
    inside_state_set: bool
    law_inside_input_set: bool
    worst_margin: float


def _max_over(P: HalfspacePolytope, directions):
    """max_{z in P} d^T z for each row d of ``directions``."""
    out = []
    for d in np.atleast_2d(directions):
        res = linprog(-d, A_ub=P.A, b_ub=P.b, bounds=[(None, None)] * P.dim, method="highs")
        if res.status != 0:
            raise SmpcError(f"terminal invariance LP failed: {res.message}")
        out.append(-res.fun)
    return np.array(out)


def check_terminal_invariance(terminal: TerminalSpec, A, B, Z_inf=None, V_inf=None):
    """Positive invariance of the terminal set under A + B K_f, plus the
    containments Z_f in Z_inf and K_f Z_f in V_inf when those sets are given."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if terminal.kind == "origin":
        inside_z = True if Z_inf is None else bool(np.all(Z_inf.b >= 0))
        inside_v = True if V_inf is None else bool(np.all(V_inf.b >= 0))
        margins = [0.0]
        if Z_inf is not None:
            margins.append(Z_inf.b.min())
        if V_inf is not None:
            margins.append(V_inf.b.min())
        return InvarianceReport(True, inside_z, inside_v, float(min(margins)))
    Zf = terminal.polytope
    K_f = np.atleast_2d(terminal.K_f)
    closed = A + B @ K_f
    margin = Zf.b - _max_over(Zf, Zf.A @ closed)
    worst = margin.min()
    invariant = bool(np.all(margin >= -1e-9))
    inside_z = inside_v = True
    if Z_inf is not None:
        m = Z_inf.b - _max_over(Zf, Z_inf.A)
        inside_z = bool(np.all(m >= -1e-9))
        worst = min(worst, m.min())
    if V_inf is not None:
        m = V_inf.b - _max_over(Zf, V_inf.A @ K_f)
        inside_v = bool(np.all(m >= -1e-9))
        worst = min(worst, m.min())
    return InvarianceReport(invariant, inside_z, inside_v, float(worst))

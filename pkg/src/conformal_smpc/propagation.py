"""Error trajectories from disturbance (and measurement-noise) trajectories.

The autonomous error systems start at zero, so each error trajectory is a
deterministic function of one sample trajectory and i.i.d. samples map to
i.i.d. error trajectories.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import TrajectoryDataset
from .exceptions import AlignmentError, DimensionError, StabilityError
from .system import LtiSystem, check_schur


@dataclass(frozen=True)
class ErrorTrajectorySet:
    """Error samples e(1..T); ``combined`` is the calibrated quantity.

    For state feedback ``combined`` is the state error x - z. For output
    feedback it is estimation error plus nominal error, i.e. again x - z.
    """

    state_errors: TrajectoryDataset
    horizon: int
    gains: dict = field(default_factory=dict)
    estimation_errors: Optional[TrajectoryDataset] = None
    nominal_errors: Optional[TrajectoryDataset] = None

    @property
    def combined(self) -> np.ndarray:
        return self.state_errors.samples

    @property
    def count(self):
        return self.state_errors.count

    @property
    def output_feedback(self):
        return self.estimation_errors is not None


def _check_source(ds, role, dim, name):
    if ds.role != role:
        raise DimensionError(f"{name} must have role {role!r}, got {ds.role!r}")
    if ds.dim != dim:
        raise DimensionError(f"{name} has dimension {ds.dim}, expected {dim}")


def propagate(M, inputs):
    """Iterate e(t+1) = M e(t) + input(t) from e(0) = 0 for a batch.

    ``inputs`` has shape (S, T, n); the result holds e(1..T) in the same shape.
    """
    inputs = np.asarray(inputs, dtype=float)
    out = np.empty_like(inputs)
    e = np.zeros(inputs.shape[::2])
    for t in range(inputs.shape[1]):
        e = e @ M.T + inputs[:, t]
        out[:, t] = e
    return out


def propagate_state_errors(sys: LtiSystem, W: TrajectoryDataset, horizon=None):
    """e(t+1) = A_K e(t) + w(t) with e(0) = 0; returns e(1..T) per sample."""
    _check_source(W, "disturbance", sys.nx, "W")
    A_K = sys.A_K
    if not check_schur(A_K).stable:
        raise StabilityError("A + BK is not Schur")
    T = W.length if horizon is None else int(horizon)
    if T > W.length:
        raise DimensionError(f"horizon {T} exceeds trajectory length {W.length}")
    errors = propagate(A_K, W.samples[:, :T])
    return ErrorTrajectorySet(
        TrajectoryDataset("error", errors, W.seed), T, {"K": sys.K.tolist()})


def propagate_output_errors(sys: LtiSystem, W: TrajectoryDataset, H: TrajectoryDataset,
                            horizon=None):
    """Coupled estimation/nominal error recursions from zero.

    ehat(t+1) = A_L ehat(t) + w(t) - L eta(t)
    ebar(t+1) = A_K ebar(t) + L (C ehat(t) + eta(t))
    """
    if not sys.has_observer:
        raise DimensionError("output-feedback propagation needs C and L")
    _check_source(W, "disturbance", sys.nx, "W")
    _check_source(H, "noise", sys.ny, "H")
    if W.count != H.count or W.length != H.length:
        raise AlignmentError(
            f"disturbance ({W.count}x{W.length}) and noise ({H.count}x{H.length}) "
            "datasets are not aligned")
    T = W.length if horizon is None else int(horizon)
    if T > W.length:
        raise DimensionError(f"horizon {T} exceeds trajectory length {W.length}")
    ehat_traj, ebar_traj = output_error_recursion(sys, W.samples[:, :T], H.samples[:, :T])
    combined = ehat_traj + ebar_traj
    gains = {"K": sys.K.tolist(), "L": sys.L.tolist()}
    return ErrorTrajectorySet(
        TrajectoryDataset("error", combined, W.seed), T, gains,
        TrajectoryDataset("estimation_error", ehat_traj, W.seed),
        TrajectoryDataset("nominal_error", ebar_traj, W.seed))


def output_error_recursion(sys: LtiSystem, w, eta, ehat0=None, ebar0=None):
    """Batched coupled recursion; ``w`` (S, T, nx), ``eta`` (S, T, ny).

    Returns (ehat, ebar) at steps 1..T, each of shape (S, T, nx).
    """
    A_L, A_K, L, C = sys.A_L, sys.A_K, sys.L, sys.C
    if not (check_schur(A_L).stable and check_schur(A_K).stable):
        raise StabilityError("A - LC and A + BK must both be Schur")
    S, T, nx = w.shape
    ehat = np.zeros((S, nx)) if ehat0 is None else np.broadcast_to(ehat0, (S, nx)).astype(float)
    ebar = np.zeros((S, nx)) if ebar0 is None else np.broadcast_to(ebar0, (S, nx)).astype(float)
    ehat_traj = np.empty((S, T, nx))
    ebar_traj = np.empty((S, T, nx))
    for t in range(T):
        innovation = ehat @ C.T + eta[:, t]
        ehat, ebar = (ehat @ A_L.T + w[:, t] - eta[:, t] @ L.T,
                      ebar @ A_K.T + innovation @ L.T)
        ehat_traj[:, t] = ehat
        ebar_traj[:, t] = ebar
    return ehat_traj, ebar_traj


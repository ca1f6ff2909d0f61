"""Conformal confidence regions for error trajectories.

A region is the sublevel set {E : s(E) <= qhat} of a convex score ``s``
that takes the maximum of a per-step norm over the horizon, so its
projection onto any single time step is a ball or an ellipsoid.
"""
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .data import SplitSpec, TrajectoryDataset, split
from .exceptions import (CalibrationError, DimensionError, InsufficientSamplesError,
                         PacInfeasibleError)
from .geometry import Ellipsoid

KINDS = ("max_norm", "weighted_max_norm", "mahalanobis")

REG_RELATIVE = 1e-8
REG_FLOOR = 1e-12


def _as_batch(errors):
    if isinstance(errors, TrajectoryDataset):
        return errors.samples
    if hasattr(errors, "combined"):
        return errors.combined
    E = np.asarray(errors, dtype=float)
    return E[None] if E.ndim == 2 else E


def regularize(cov):
    """Symmetrize and add delta * I with delta = max(1e-8 tr/n, 1e-12)."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    n = cov.shape[-1]
    delta = np.maximum(REG_RELATIVE * np.trace(cov, axis1=-2, axis2=-1) / n, REG_FLOOR)
    return cov + delta[..., None, None] * np.eye(n)


def fit_moments(errors, zero_mean=False):
    """Per-step sample mean and unbiased sample covariance.

    With ``zero_mean`` the centers are fixed at the origin and the covariance
    is accumulated around the origin. Returns arrays of shape (T, n) and
    (T, n, n); covariances are regularized to be positive definite.
    """
    E = _as_batch(errors)
    M, T, n = E.shape
    if M < n + 1:
        raise CalibrationError(
            f"{M} fit trajectories cannot give an invertible {n}x{n} covariance; "
            f"use at least {n + 1} or regularize")
    # shifted mean: exact when all trajectories coincide
    mu = np.zeros((T, n)) if zero_mean else E[0] + (E - E[0]).mean(axis=0)
    D = E - mu
    cov = np.einsum("kti,ktj->tij", D, D) / (M - 1)
    return mu, regularize(cov)


@dataclass(frozen=True)
class ScoreFunction:
    kind: str
    horizon: int
    weights: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    shapes: Optional[np.ndarray] = None
    _chol: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CalibrationError(f"unknown score kind {self.kind!r}")
        T = int(self.horizon)
        if self.kind == "weighted_max_norm":
            if self.weights is None:
                raise CalibrationError("weighted score needs weights")
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape != (T,) or np.any(w <= 0):
                raise CalibrationError(f"need {T} strictly positive weights")
            object.__setattr__(self, "weights", w)
        if self.kind == "mahalanobis":
            if self.centers is None or self.shapes is None:
                raise CalibrationError("Mahalanobis score needs fitted moments")
            mu = np.asarray(self.centers, dtype=float)
            S = np.asarray(self.shapes, dtype=float)
            if mu.shape[0] != T or S.shape != (T, mu.shape[1], mu.shape[1]):
                raise CalibrationError("moment arrays do not match the horizon")
            S = 0.5 * (S + np.swapaxes(S, -1, -2))
            try:
                chol = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise CalibrationError("covariance estimates must be positive definite") from exc
            object.__setattr__(self, "centers", mu)
            object.__setattr__(self, "shapes", S)
            object.__setattr__(self, "_chol", chol)

    @classmethod
    def max_norm(cls, horizon):
        return cls("max_norm", horizon)

    @classmethod
    def weighted(cls, weights):
        weights = np.asarray(weights, dtype=float)
        return cls("weighted_max_norm", weights.size, weights=weights)

    @classmethod
    def mahalanobis(cls, centers, shapes):
        centers = np.asarray(centers, dtype=float)
        return cls("mahalanobis", centers.shape[0], centers=centers, shapes=shapes)

    def truncated(self, horizon):
        """The same score restricted to steps 1..horizon."""
        if not 1 <= horizon <= self.horizon:
            raise DimensionError(f"cannot truncate a {self.horizon}-step score to {horizon}")
        if self.kind == "mahalanobis":
            return ScoreFunction.mahalanobis(self.centers[:horizon], self.shapes[:horizon])
        if self.kind == "weighted_max_norm":
            return ScoreFunction.weighted(self.weights[:horizon])
        return ScoreFunction.max_norm(horizon)

    def step_values(self, errors):
        """Per-step values for t = 1..T; input (T', n) or (M, T', n) with T' >= T."""
        E = np.asarray(errors, dtype=float)
        single = E.ndim == 2
        if single:
            E = E[None]
        T = self.horizon
        if E.shape[1] < T:
            raise DimensionError(f"trajectory has {E.shape[1]} steps, score needs {T}")
        E = E[:, :T]
        if self.kind == "mahalanobis":
            D = E - self.centers
            y = np.linalg.solve(self._chol, D[..., None])[..., 0]
            values = np.linalg.norm(y, axis=-1)
        else:
            values = np.linalg.norm(E, axis=-1)
            if self.kind == "weighted_max_norm":
                values = values * self.weights
        return values[0] if single else values

    def __call__(self, errors):
        return self.step_values(errors).max(axis=-1)


def score_trajectory(sf: ScoreFunction, E):
    return float(sf(np.asarray(E, dtype=float)))


def quantile_index(M, p):
    """k = ceil((M + 1) p), guarded against float round-up of exact integers."""
    if not 0 < p < 1:
        raise CalibrationError(f"level must lie in (0, 1), got {p}")
    if M < 1:
        raise InsufficientSamplesError("no calibration scores", math.ceil(p / (1 - p)))
    x = (M + 1) * p
    return int(math.ceil(x - 1e-12 * x))


def min_calibration_samples(p):
    x = p / (1 - p)
    return int(math.ceil(x - 1e-12 * x))


def conformal_quantile(scores, p):
    """The k-th smallest score, k = ceil((M + 1) p)."""
    s = np.sort(np.asarray(scores, dtype=float).reshape(-1))
    M = s.size
    k = quantile_index(M, p)
    if k > M:
        need = min_calibration_samples(p)
        raise InsufficientSamplesError(
            f"level {p} needs at least {need} calibration samples, got {M}", need)
    return float(s[k - 1])


def pac_tighten(theta, epsilon, M):
    """theta - sqrt(-ln(epsilon) / (2 M))."""
    if not 0 < theta < 1 or not 0 < epsilon <= 1 or M < 1:
        raise CalibrationError("need theta in (0,1), epsilon in (0,1], M >= 1")
    tightened = theta - math.sqrt(-math.log(epsilon) / (2 * M))
    if tightened <= 0:
        need = int(math.ceil(-math.log(epsilon) / (2 * theta ** 2)))
        raise PacInfeasibleError(
            f"PAC tightening of {theta} at confidence {epsilon} needs more than {need} "
            f"samples, got {M}", need)
    return tightened


def union_bound_levels(p, horizon):
    """Per-step miscoverage (1 - p) / N that makes per-step regions jointly valid."""
    if not 0 < p < 1 or horizon < 1:
        raise CalibrationError("need p in (0,1) and horizon >= 1")
    return (1 - p) / horizon


@dataclass(frozen=True)
class ConfidenceRegion:
    score: ScoreFunction
    qhat: float
    level: float
    M_cal: int
    k: int
    pac: Optional[Tuple[float, float]] = None
    fit_indices: Tuple[int, ...] = ()
    cal_indices: Tuple[int, ...] = ()
    dim: int = 0

    @property
    def horizon(self):
        return self.score.horizon

    @property
    def kind(self):
        return self.score.kind

    def contains(self, E):
        return self.score(E) <= self.qhat

    def project(self, t) -> Ellipsoid:
        """Projection onto time step t (1-based)."""
        if not 1 <= t <= self.horizon:
            raise DimensionError(f"time {t} outside 1..{self.horizon}")
        if self.kind == "mahalanobis":
            return Ellipsoid(self.score.centers[t - 1], self.score.shapes[t - 1], self.qhat)
        radius = self.qhat if self.kind == "max_norm" else self.qhat / self.score.weights[t - 1]
        return Ellipsoid(np.zeros(self.dim), np.eye(self.dim), radius)

    def projections(self):
        return [self.project(t) for t in range(1, self.horizon + 1)]


def calibrate(errors, split_spec: Optional[SplitSpec], kind="mahalanobis", level=0.9,
              pac_epsilon=None, weights=None, zero_mean=False, horizon=None):
    """Fit (if needed) on one part of the data, score the held-out part, take the quantile.

    ``errors`` is an ErrorTrajectorySet, a TrajectoryDataset or an (M, T, n)
    array. Without a split, score kinds that need no fit use every trajectory
    for calibration.
    """
    E = _as_batch(errors)
    M, T_all, n = E.shape
    T = T_all if horizon is None else int(horizon)
    if T > T_all:
        raise CalibrationError(f"horizon {T} exceeds trajectory length {T_all}")
    ds = TrajectoryDataset("error", E[:, :T])
    if split_spec is None:
        if kind == "mahalanobis":
            raise CalibrationError("Mahalanobis calibration needs a fit/calibration split")
        fit_idx, cal_idx = np.array([], dtype=int), np.arange(M)
        cal = ds
    else:
        fit, cal, fit_idx, cal_idx = split(ds, split_spec)
    if kind == "mahalanobis":
        mu, cov = fit_moments(fit, zero_mean=zero_mean)
        sf = ScoreFunction.mahalanobis(mu, cov)
    elif kind == "weighted_max_norm":
        sf = ScoreFunction("weighted_max_norm", T, weights=weights)
    else:
        sf = ScoreFunction.max_norm(T)
    assert not set(fit_idx.tolist()) & set(cal_idx.tolist())
    scores = sf(cal.samples)
    M_cal = cal.count
    pac = None
    p = level
    if pac_epsilon is not None:
        theta_tilde = pac_tighten(1 - level, pac_epsilon, M_cal)
        pac = (float(pac_epsilon), theta_tilde)
        p = 1 - theta_tilde
    qhat = conformal_quantile(scores, p)
    return ConfidenceRegion(sf, qhat, float(level), M_cal, quantile_index(M_cal, p), pac,
                            tuple(int(i) for i in fit_idx), tuple(int(i) for i in cal_idx), n)


def save_region(region: ConfidenceRegion, path):
    sf = region.score
    payload = {
        "kind": sf.kind,
        "level": region.level,
        "qhat": region.qhat,
        "M_cal": region.M_cal,
        "k": region.k,
        "dim": region.dim,
        "horizon": sf.horizon,
        "pac": None if region.pac is None else {"epsilon": region.pac[0],
                                                 "theta_tilde": region.pac[1]},
        "weights": None if sf.weights is None else sf.weights.tolist(),
        "centers": None if sf.centers is None else sf.centers.tolist(),
        "shapes": None if sf.shapes is None else sf.shapes.tolist(),
        "fit_indices": list(region.fit_indices),
        "cal_indices": list(region.cal_indices),
    }
    with open(os.fspath(path), "w") as f:
        json.dump(payload, f, indent=1)


def load_region(path) -> ConfidenceRegion:
    try:
        with open(os.fspath(path)) as f:
            payload = json.load(f)
        sf = ScoreFunction(payload["kind"], payload["horizon"],
                           weights=payload.get("weights"),
                           centers=payload.get("centers"), shapes=payload.get("shapes"))
        pac = payload.get("pac")
        return ConfidenceRegion(
            sf, float(payload["qhat"]), float(payload["level"]), int(payload["M_cal"]),
            int(payload["k"]), None if pac is None else (pac["epsilon"], pac["theta_tilde"]),
            tuple(payload.get("fit_indices", ())), tuple(payload.get("cal_indices", ())),
            int(payload["dim"]))
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CalibrationError(f"cannot read region file {path}: {exc}") from exc

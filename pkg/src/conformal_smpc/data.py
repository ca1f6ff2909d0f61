"""Trajectory datasets: generation, splitting and file round-trips.

Built-in generators draw entries independently across time. Externally
loaded datasets may carry any time correlation; only the trajectories
themselves have to be i.i.d.
"""
import json
import logging
import os
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import (DatasetDimensionError, DatasetError, DatasetParseError,
                         RaggedDatasetError)

log = logging.getLogger(__name__)

ROLES = ("disturbance", "noise", "error", "estimation_error", "nominal_error")


@dataclass(frozen=True)
class TrajectoryDataset:
    """``samples`` has shape (M, T, n): M trajectories of T vectors in R^n."""

    role: str
    samples: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise DatasetError(f"unknown role {self.role!r}; expected one of {ROLES}")
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 3:
            raise DatasetDimensionError(
                f"samples must have shape (M, T, n), got {samples.shape}")
        if samples.shape[0] < 1:
            raise DatasetError("a dataset needs at least one trajectory")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def count(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def dim(self):
        return self.samples.shape[2]

    def __len__(self):
        return self.count

    def subset(self, indices):
        return TrajectoryDataset(self.role, self.samples[np.asarray(indices, dtype=int)], self.seed)

    def equals(self, other):
        return (self.role == other.role and self.samples.shape == other.samples.shape
                and np.array_equal(self.samples, other.samples))


class SplitSpec(NamedTuple):
    n_fit: int
    n_cal: int
    shuffle_seed: int = 0


def _psd_factor(cov, n):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (n, n):
        raise DatasetDimensionError(f"covariance must be {n}x{n}, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise DatasetError("covariance must be symmetric")
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() < -1e-12 * max(1.0, evals.max()):
        raise DatasetError("covariance must be positive semidefinite")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def generate_gaussian(dim, length, count, covariance, mean=None, seed=None,
                      role="disturbance"):
    """i.i.d. N(mean, covariance) entries, via an eigen-factor so that singular
    covariances are allowed."""
    factor = _psd_factor(covariance, dim)
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float).reshape(dim)
    rng = np.random.default_rng(seed)
    draws = rng.standard_normal((count, length, dim))
    samples = draws @ factor.T + mean
    return TrajectoryDataset(role, samples, seed)


def generate_uniform(dim, length, count, half_widths, seed=None, role="disturbance"):
    half_widths = np.broadcast_to(np.asarray(half_widths, dtype=float), (dim,))
    if np.any(half_widths < 0):
        raise DatasetError("half widths must be nonnegative")
    rng = np.random.default_rng(seed)
    samples = rng.uniform(-1.0, 1.0, size=(count, length, dim)) * half_widths
    return TrajectoryDataset(role, samples, seed)


def split(ds: TrajectoryDataset, spec: SplitSpec):
    """Shuffle trajectory order (never time order) and cut off fit and calibration parts.

    Returns ``(fit, cal, fit_idx, cal_idx)`` where the index arrays refer to
    positions in ``ds``.
    """
    n_fit, n_cal = int(spec.n_fit), int(spec.n_cal)
    if n_fit < 0 or n_cal < 1:
        raise DatasetError("split needs n_fit >= 0 and n_cal >= 1")
    if n_fit + n_cal > ds.count:
        raise DatasetError(
            f"split asks for {n_fit} + {n_cal} trajectories but only {ds.count} exist")
    if n_cal == 1:
        log.warning("calibration set holds a single trajectory")
    perm = np.random.default_rng(spec.shuffle_seed).permutation(ds.count)
    fit_idx, cal_idx = perm[:n_fit], perm[n_fit:n_fit + n_cal]
    return ds.subset(fit_idx), ds.subset(cal_idx), fit_idx, cal_idx


def _header(ds):
    return f"# role={ds.role} M={ds.count} T={ds.length} n={ds.dim}"


def save_dataset(ds: TrajectoryDataset, path):
    """Write ``ds`` as CSV (``.csv``) or JSON (anything else ending in ``.json``)."""
    path = os.fspath(path)
    if path.endswith(".json"):
        payload = {"role": ds.role, "M": ds.count, "T": ds.length, "n": ds.dim,
                   "seed": ds.seed, "samples": ds.samples.tolist()}
        with open(path, "w") as f:
            json.dump(payload, f)
        return
    with open(path, "w") as f:
        f.write(_header(ds) + "\n")
        for k in range(ds.count):
            for t in range(ds.length):
                values = ",".join(format(v, ".17g") for v in ds.samples[k, t])
                f.write(f"{k + 1},{t},{values}\n")


def _parse_header(line):
    if not line.startswith("#"):
        raise DatasetParseError("missing '# role=... M=... T=... n=...' header")
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise DatasetParseError(f"malformed header token {token!r}")
        fields[key] = value
    try:
        return fields["role"], int(fields["M"]), int(fields["T"]), int(fields["n"])
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(f"malformed header: {line.strip()!r}") from exc


def _load_csv(path):
    with open(path) as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetParseError(f"{path} is empty")
    role, M, T, n = _parse_header(lines[0])
    rows = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != n + 2:
            raise DatasetDimensionError(
                f"{path}:{lineno}: expected {n} values, got {len(parts) - 2}")
        try:
            k, t = int(parts[0]), int(parts[1])
            rows[(k, t)] = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetParseError(f"{path}:{lineno}: {exc}") from exc
    lengths = {}
    for k, t in rows:
        lengths[k] = lengths.get(k, 0) + 1
    if sorted(lengths) != list(range(1, M + 1)):
        raise DatasetParseError(f"{path}: trajectory indices do not cover 1..{M}")
    if any(count != T for count in lengths.values()):
        raise RaggedDatasetError(f"{path}: trajectories have unequal lengths")
    samples = np.empty((M, T, n))
    for (k, t), values in rows.items():
        if not 0 <= t < T:
            raise RaggedDatasetError(f"{path}: time index {t} outside 0..{T - 1}")
        samples[k - 1, t] = values
    return TrajectoryDataset(role, samples)


def _load_json(path):
    try:
        with open(path) as f:
            payload = json.load(f)
        role, samples = payload["role"], payload["samples"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetParseError(f"{path}: {exc}") from exc
    lengths = {len(traj) for traj in samples}
    if len(lengths) > 1:
        raise RaggedDatasetError(f"{path}: trajectories have unequal lengths")
    try:
        array = np.array(samples, dtype=float)
    except ValueError as exc:
        raise DatasetDimensionError(f"{path}: inconsistent vector dimensions") from exc
    if array.ndim != 3:
        raise DatasetDimensionError(f"{path}: inconsistent vector dimensions")
    return TrajectoryDataset(role, array, payload.get("seed"))


def load_dataset(path, expected_dim=None, expected_length=None):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DatasetError(f"dataset file {path} does not exist")
    ds = _load_json(path) if path.endswith(".json") else _load_csv(path)
    if expected_dim is not None and ds.dim != expected_dim:
        raise DatasetDimensionError(
            f"{path}: vector dimension {ds.dim}, expected {expected_dim}")
    if expected_length is not None and ds.length < expected_length:
        raise DatasetDimensionError(
            f"{path}: trajectory length {ds.length}, need at least {expected_length}")
    return ds


@dataclass(frozen=True)
class NoiseModel:
    """i.i.d. noise law used both for datasets and for fresh test realizations.

    ``parameter`` is a covariance for ``gaussian``, per-coordinate half widths
    for ``uniform``, and ignored for ``zero``.
    """

    kind: str
    dim: int
    parameter: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform", "zero"):
            raise DatasetError(f"unknown noise kind {self.kind!r}")
        if self.kind == "gaussian":
            object.__setattr__(self, "_factor", _psd_factor(self.parameter, self.dim))
        elif self.kind == "uniform":
            hw = np.broadcast_to(np.asarray(self.parameter, dtype=float), (self.dim,))
            if np.any(hw < 0):
                raise DatasetError("half widths must be nonnegative")
            object.__setattr__(self, "_factor", np.array(hw))

    @property
    def covariance(self):
        if self.kind == "gaussian":
            return self._factor @ self._factor.T
        if self.kind == "uniform":
            return np.diag(self._factor ** 2 / 3.0)
        return np.zeros((self.dim, self.dim))

    def draw(self, rng, count, length):
        if self.kind == "zero":
            return np.zeros((count, length, self.dim))
        if self.kind == "gaussian":
            return rng.standard_normal((count, length, self.dim)) @ self._factor.T
        return rng.uniform(-1.0, 1.0, size=(count, length, self.dim)) * self._factor

    def dataset(self, count, length, seed, role="disturbance"):
        rng = np.random.default_rng(seed)
        return TrajectoryDataset(role, self.draw(rng, count, length), seed)

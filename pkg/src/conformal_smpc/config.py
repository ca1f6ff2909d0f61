"""Run configuration: a single JSON document validated as a whole.

Every validation failure names the offending field with a dotted path, e.g.
``horizon.N: must not exceed horizon.N_bar``.
"""
import copy
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np

from .exceptions import ConfigError

MODES = ("state_feedback", "output_feedback")
MODE_ALIASES = {"state": "state_feedback", "output": "output_feedback"}

# Reference pendulum experiment. K is the LQR gain for (A, B, Q, R); L is the
# steady-state Kalman gain for the disturbance and noise laws below. The
# disturbance covariance is diag(0.01, 0.01) scaled by 0.01, the largest
# decade for which the problem is feasible at x0.
REFERENCE: Dict[str, Any] = {
    "system": {
        "A": [[1.0, 0.1], [0.75, 0.95]],
        "B": [[0.0], [0.1]],
        "C": [[1.0, 0.0]],
        "D": [[0.0]],
        "K": [[-13.700856708823485, -5.041701379117678]],
        "L": [[0.7263728722352137], [1.1788286449153542]],
    },
    "cost": {"Q": [[100.0, 0.0], [0.0, 100.0]], "R": [[10.0]], "P_f": None},
    "constraints": {
        "X": {"box": [[-1.0, 1.0], [-1.0, 1.0]]},
        "U": {"box": [[-5.0, 5.0]]},
        "terminal": {"kind": "origin"},
    },
    "horizon": {"N": 20, "N_bar": 100, "theta": 0.1, "S": 100},
    "data": {
        "disturbance": {"kind": "gaussian", "covariance": [[0.01, 0.0], [0.0, 0.01]],
                        "scale": 0.01},
        "noise": {"kind": "gaussian", "covariance": [[0.0001]], "scale": 1.0},
        "disturbance_path": None,
        "noise_path": None,
        "M": 750,
        "split": {"n_fit": 250, "n_cal": 500, "shuffle_seed": 0},
        "seeds": {"calibration": 1, "noise": 2, "scenarios": 3, "scenario_noise": 4,
                  "test": 5},
    },
    "calibration": {"score": "mahalanobis", "pac_epsilon": None, "zero_mean": False,
                    "weights": None, "region_path": None},
    "evaluation": {"n_test": 1000, "baselines": True, "x0": [0.75, -0.70],
                   "mode": "state_feedback", "workers": 1, "plot_rollouts": 50},
    "output_dir": "out",
}


def reference_config() -> Dict[str, Any]:
    return copy.deepcopy(REFERENCE)


def _get(d, path):
    cur = d
    for key in path.split("."):
        if not isinstance(cur, dict) or key not in cur:
            raise ConfigError(f"{path}: missing")
        cur = cur[key]
    return cur


def _matrix(d, path, shape=None, optional=False):
    try:
        value = _get(d, path)
    except ConfigError:
        if optional:
            return None
        raise
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: missing")
    try:
        M = np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a numeric matrix ({exc})") from exc
    if M.ndim != 2:
        raise ConfigError(f"{path}: expected a matrix")
    if not np.all(np.isfinite(M)):
        raise ConfigError(f"{path}: entries must be finite")
    if shape is not None:
        want = tuple(s if s is not None else M.shape[i] for i, s in enumerate(shape))
        if M.shape != want:
            raise ConfigError(f"{path}: shape {M.shape}, expected {want}")
    return M


def _int(d, path, lo=None, hi=None):
    v = _get(d, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(f"{path}: must be at least {lo}")
    if hi is not None and v > hi:
        raise ConfigError(f"{path}: must be at most {hi}")
    return v


def _float(d, path, lo=None, hi=None, open_interval=False):
    v = _get(d, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    v = float(v)
    if open_interval and not (lo < v < hi):
        raise ConfigError(f"{path}: must lie strictly between {lo} and {hi}")
    if not open_interval and ((lo is not None and v < lo) or (hi is not None and v > hi)):
        raise ConfigError(f"{path}: must lie in [{lo}, {hi}]")
    return v


def normalize_mode(mode):
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f"evaluation.mode: unknown mode {mode!r}")
    return mode


def _polytope(d, path, n):
    spec = _get(d, path)
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: expected an object with 'box', 'facets' or 'A'/'b'")
    if "box" in spec:
        box = _matrix(d, f"{path}.box", (n, 2))
        if np.any(box[:, 0] >= box[:, 1]):
            raise ConfigError(f"{path}.box: lower bounds must be below upper bounds")
        if np.any(box[:, 0] >= 0) or np.any(box[:, 1] <= 0):
            raise ConfigError(f"{path}.box: must contain the origin in its interior")
        return
    if "facets" in spec:
        facets = spec["facets"]
        if not isinstance(facets, list) or not facets:
            raise ConfigError(f"{path}.facets: expected a list of [normal, offset] pairs")
        for i, pair in enumerate(facets):
            ok = (isinstance(pair, list) and len(pair) == 2 and isinstance(pair[0], list)
                  and len(pair[0]) == n and isinstance(pair[1], (int, float)))
            if not ok:
                raise ConfigError(f"{path}.facets[{i}]: expected [[{n} numbers], offset]")
            if pair[1] <= 0:
                raise ConfigError(f"{path}.facets[{i}]: must contain the origin in its interior")
        return
    A = _matrix(d, f"{path}.A", (None, n))
    b = _matrix(d, f"{path}.b").reshape(-1)
    if b.size != A.shape[0]:
        raise ConfigError(f"{path}.b: {b.size} offsets for {A.shape[0]} normals")
    if np.any(b <= 0):
        raise ConfigError(f"{path}.b: must contain the origin in its interior")


def _noise(d, path, dim):
    kind = _get(d, f"{path}.kind")
    if kind not in ("gaussian", "uniform", "zero"):
        raise ConfigError(f"{path}.kind: unknown noise kind {kind!r}")
    scale = _get(d, path).get("scale", 1.0)
    if isinstance(scale, bool) or not isinstance(scale, (int, float)) or scale < 0:
        raise ConfigError(f"{path}.scale: must be a nonnegative number")
    if kind == "gaussian":
        S = _matrix(d, f"{path}.covariance", (dim, dim))
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-12:
            raise ConfigError(f"{path}.covariance: must be symmetric positive semidefinite")
    elif kind == "uniform":
        hw = _matrix(d, f"{path}.half_widths").reshape(-1)
        if hw.size not in (1, dim) or np.any(hw < 0):
            raise ConfigError(f"{path}.half_widths: need {dim} nonnegative values")


@dataclass
class RunConfig:
    raw: Dict[str, Any]
    source: Optional[str] = None

    def __getitem__(self, path):
        return _get(self.raw, path)

    def get(self, path, default=None):
        try:
            return _get(self.raw, path)
        except ConfigError:
            return default

    @property
    def mode(self):
        return normalize_mode(self["evaluation.mode"])

    @property
    def level(self):
        return 1.0 - self["horizon.theta"]

    @property
    def calibration_horizon(self):
        return self["horizon.N_bar"] + self["horizon.N"]

    def resolve(self, path):
        """Data paths are relative to the config file."""
        if path is None or os.path.isabs(path) or self.source is None:
            return path
        return os.path.join(os.path.dirname(os.path.abspath(self.source)), path)

    def with_overrides(self, **dotted):
        raw = copy.deepcopy(self.raw)
        for path, value in dotted.items():
            keys = path.split(".")
            cur = raw
            for k in keys[:-1]:
                cur = cur.setdefault(k, {})
            cur[keys[-1]] = value
        return validate(raw, self.source)


def validate(raw: Dict[str, Any], source=None) -> RunConfig:
    """Check the whole document before anything is computed."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    A = _matrix(raw, "system.A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ConfigError(f"system.A: must be square, got {A.shape}")
    B = _matrix(raw, "system.B", (n, None))
    m = B.shape[1]
    C = _matrix(raw, "system.C", (None, n), optional=True)
    if C is not None:
        _matrix(raw, "system.D", (C.shape[0], m), optional=True)
    K = _get(raw, "system.K")
    if K != "lqr":
        _matrix(raw, "system.K", (m, n))
    L = raw["system"].get("L")
    if L not in (None, "kalman"):
        if C is None:
            raise ConfigError("system.L: an observer gain needs system.C")
        _matrix(raw, "system.L", (n, C.shape[0]))
    Q = _matrix(raw, "cost.Q", (n, n))
    R = _matrix(raw, "cost.R", (m, m))
    _matrix(raw, "cost.P_f", (n, n), optional=True)
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise ConfigError("cost.Q: must be positive semidefinite")
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ConfigError("cost.R: must be positive definite")
    _polytope(raw, "constraints.X", n)
    _polytope(raw, "constraints.U", m)
    kind = _get(raw, "constraints.terminal.kind")
    if kind == "polytope":
        _polytope(raw, "constraints.terminal", n)
        _matrix(raw, "constraints.terminal.K_f", (m, n))
    elif kind != "origin":
        raise ConfigError(f"constraints.terminal.kind: unknown kind {kind!r}")
    N = _int(raw, "horizon.N", lo=1)
    N_bar = _int(raw, "horizon.N_bar", lo=1)
    if N > N_bar:
        raise ConfigError("horizon.N: must not exceed horizon.N_bar")
    _float(raw, "horizon.theta", 0.0, 1.0, open_interval=True)
    _int(raw, "horizon.S", lo=1)
    _noise(raw, "data.disturbance", n)
    if raw["data"].get("noise") is not None:
        _noise(raw, "data.noise", C.shape[0] if C is not None else 1)
    M = _int(raw, "data.M", lo=2)
    n_fit = _int(raw, "data.split.n_fit", lo=0)
    n_cal = _int(raw, "data.split.n_cal", lo=1)
    _int(raw, "data.split.shuffle_seed", lo=0)
    if n_fit + n_cal > M:
        raise ConfigError(f"data.split: n_fit + n_cal = {n_fit + n_cal} exceeds data.M = {M}")
    for key in ("calibration", "noise", "scenarios", "scenario_noise", "test"):
        _int(raw, f"data.seeds.{key}", lo=0)
    score = _get(raw, "calibration.score")
    if score not in ("max_norm", "weighted_max_norm", "mahalanobis"):
        raise ConfigError(f"calibration.score: unknown score {score!r}")
    if score == "mahalanobis" and n_fit < n + 1:
        raise ConfigError(f"data.split.n_fit: the Mahalanobis score needs at least {n + 1}")
    if score == "weighted_max_norm":
        w = _matrix(raw, "calibration.weights").reshape(-1)
        if w.size != N_bar + N or np.any(w <= 0):
            raise ConfigError(f"calibration.weights: need {N_bar + N} positive weights")
    if raw["calibration"].get("pac_epsilon") is not None:
        _float(raw, "calibration.pac_epsilon", 0.0, 1.0, open_interval=True)
    _int(raw, "evaluation.n_test", lo=1)
    _int(raw, "evaluation.workers", lo=1)
    _int(raw, "evaluation.plot_rollouts", lo=0)
    if not isinstance(_get(raw, "evaluation.baselines"), bool):
        raise ConfigError("evaluation.baselines: expected true or false")
    _matrix(raw, "evaluation.x0", (1, n))
    normalize_mode(_get(raw, "evaluation.mode"))
    if normalize_mode(raw["evaluation"]["mode"]) == "output_feedback":
        if C is None or L is None or raw["data"].get("noise") is None:
            raise ConfigError("evaluation.mode: output feedback needs system.C, system.L "
                              "and data.noise")
    if not isinstance(_get(raw, "output_dir"), str):
        raise ConfigError("output_dir: expected a path string")
    return RunConfig(copy.deepcopy(raw), source)


def load_config(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<file>: {path} is not valid JSON ({exc})") from exc
    return validate(raw, path)


def save_config(rc_or_raw, path):
    raw = rc_or_raw.raw if isinstance(rc_or_raw, RunConfig) else rc_or_raw
    with open(path, "w") as f:
        json.dump(raw, f, indent=2)
        f.write("\n")

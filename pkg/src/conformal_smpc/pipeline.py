"""Builds the objects of one experiment from a validated RunConfig."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import controller as ctl
from . import evaluation as ev
from .calibration import ConfidenceRegion, calibrate, load_region
from .config import RunConfig
from .data import NoiseModel, SplitSpec, TrajectoryDataset, load_dataset
from .exceptions import ConfigError
from .geometry import HalfspacePolytope, TerminalSpec
from .propagation import propagate_output_errors, propagate_state_errors
from .system import CostSpec, LtiSystem

log = logging.getLogger(__name__)


def lqr_gain(A, B, Q, R):
    """u = K x minimizing the infinite-horizon LQ cost."""
    P = sla.solve_discrete_are(A, B, Q, R)
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def kalman_gain(A, C, Sigma_w, Sigma_eta):
    """Steady-state predictor gain L for xhat+ = A xhat + B u + L (y - C xhat)."""
    P = sla.solve_discrete_are(A.T, C.T, Sigma_w, Sigma_eta)
    return A @ P @ C.T @ np.linalg.inv(C @ P @ C.T + Sigma_eta)


def _noise_model(rc: RunConfig, key, dim):
    spec = rc[f"data.{key}"]
    scale = float(spec.get("scale", 1.0))
    if spec["kind"] == "gaussian":
        return NoiseModel("gaussian", dim, scale * np.asarray(spec["covariance"], dtype=float))
    if spec["kind"] == "uniform":
        return NoiseModel("uniform", dim, scale * np.asarray(spec["half_widths"], dtype=float))
    return NoiseModel("zero", dim)


def noise_models(rc: RunConfig, zero_noise=False):
    """(disturbance law, measurement-noise law or None)."""
    A = np.asarray(rc["system.A"], dtype=float)
    nx = A.shape[0]
    C = rc.get("system.C")
    ny = np.atleast_2d(C).shape[0] if C is not None else 1
    if zero_noise:
        return NoiseModel("zero", nx), (NoiseModel("zero", ny) if C is not None else None)
    w = _noise_model(rc, "disturbance", nx)
    eta = _noise_model(rc, "noise", ny) if rc.get("data.noise") is not None else None
    return w, eta


def build_system(rc: RunConfig, mode=None) -> LtiSystem:
    mode = mode or rc.mode
    A = np.asarray(rc["system.A"], dtype=float)
    B = np.atleast_2d(np.asarray(rc["system.B"], dtype=float))
    Q = np.asarray(rc["cost.Q"], dtype=float)
    R = np.atleast_2d(np.asarray(rc["cost.R"], dtype=float))
    K = rc["system.K"]
    K = lqr_gain(A, B, Q, R) if K == "lqr" else np.atleast_2d(np.asarray(K, dtype=float))
    C = rc.get("system.C")
    D = rc.get("system.D")
    L = rc.get("system.L")
    if C is not None:
        C = np.atleast_2d(np.asarray(C, dtype=float))
    if L == "kalman":
        w, eta = noise_models(rc)
        L = kalman_gain(A, C, w.covariance, eta.covariance)
    elif L is not None:
        L = np.atleast_2d(np.asarray(L, dtype=float))
    need_observer = mode == ctl.OUTPUT_FEEDBACK
    if need_observer and (C is None or L is None):
        raise ConfigError("system.L: output feedback needs C and L")
    return LtiSystem(A, B, K, C, D, L, require_observer=need_observer)


def build_cost(rc: RunConfig) -> CostSpec:
    return CostSpec(rc["cost.Q"], rc["cost.R"], rc.get("cost.P_f"))


def _polytope(spec, prefix):
    if "box" in spec:
        return HalfspacePolytope.box(spec["box"], prefix)
    if "facets" in spec:
        normals = [pair[0] for pair in spec["facets"]]
        offsets = [pair[1] for pair in spec["facets"]]
        return HalfspacePolytope(normals, offsets, spec.get("names"))
    return HalfspacePolytope(spec["A"], spec["b"], spec.get("names"))


def build_sets(rc: RunConfig):
    X = _polytope(rc["constraints.X"], "x")
    U = _polytope(rc["constraints.U"], "u")
    term = rc["constraints.terminal"]
    if term["kind"] == "origin":
        terminal = TerminalSpec()
    else:
        terminal = TerminalSpec("polytope", _polytope(term, "zf"), np.atleast_2d(term["K_f"]))
    return X, U, terminal


def calibration_errors(rc: RunConfig, system: LtiSystem, mode=None):
    """Error trajectories over N_bar + N steps from generated or loaded data."""
    mode = mode or rc.mode
    T = rc.calibration_horizon
    M = rc["data.M"]
    w_model, eta_model = noise_models(rc)
    path = rc.resolve(rc.get("data.disturbance_path"))
    if path:
        W = load_dataset(path, expected_dim=system.nx, expected_length=T)
        W = TrajectoryDataset("disturbance", W.samples, W.seed)
    else:
        W = w_model.dataset(M, T, rc["data.seeds.calibration"])
    if mode == ctl.STATE_FEEDBACK:
        return propagate_state_errors(system, W, T)
    npath = rc.resolve(rc.get("data.noise_path"))
    if npath:
        H = load_dataset(npath, expected_dim=system.ny, expected_length=T)
        H = TrajectoryDataset("noise", H.samples, H.seed)
    else:
        H = eta_model.dataset(W.count, T, rc["data.seeds.noise"], role="noise")
    return propagate_output_errors(system, W, H, T)


def calibrate_region(rc: RunConfig, system: LtiSystem, mode=None) -> ConfidenceRegion:
    path = rc.resolve(rc.get("calibration.region_path"))
    if path:
        return load_region(path)
    errors = calibration_errors(rc, system, mode)
    split_spec = SplitSpec(rc["data.split.n_fit"], rc["data.split.n_cal"],
                           rc["data.split.shuffle_seed"])
    return calibrate(errors, split_spec, kind=rc["calibration.score"], level=rc.level,
                     pac_epsilon=rc.get("calibration.pac_epsilon"),
                     weights=rc.get("calibration.weights"),
                     zero_mean=bool(rc.get("calibration.zero_mean", False)))


def build_controller(rc: RunConfig, system: LtiSystem, region: ConfidenceRegion, mode=None):
    """Tightened sets plus a scenario pool disjoint from the calibration data."""
    mode = mode or rc.mode
    X, U, terminal = build_sets(rc)
    w_model, eta_model = noise_models(rc)
    S, T = rc["horizon.S"], rc.calibration_horizon
    scen_w = w_model.dataset(S, T, rc["data.seeds.scenarios"]).samples
    scen_eta = None
    if mode == ctl.OUTPUT_FEEDBACK:
        scen_eta = eta_model.dataset(S, T, rc["data.seeds.scenario_noise"], "noise").samples
    return ctl.make_config(system, build_cost(rc), X, U, region, rc["horizon.N"],
                           rc["horizon.N_bar"], scen_w, scen_eta, terminal, mode)


@dataclass
class Experiment:
    rc: RunConfig
    mode: str
    system: LtiSystem
    region: ConfidenceRegion
    cfg: ctl.SmpcConfig
    w_model: NoiseModel
    eta_model: Optional[NoiseModel]

    @property
    def x0(self):
        return np.asarray(self.rc["evaluation.x0"], dtype=float)


def build_experiment(rc: RunConfig, mode=None, zero_noise=False) -> Experiment:
    mode = mode or rc.mode
    system = build_system(rc, mode)
    region = calibrate_region(rc, system, mode)
    cfg = build_controller(rc, system, region, mode)
    w_model, eta_model = noise_models(rc, zero_noise)
    return Experiment(rc, mode, system, region, cfg, w_model, eta_model)


def baseline_families(exp: Experiment):
    """Conformal region next to the Chebyshev and exact-Gaussian baselines."""
    rc, region = exp.rc, exp.region
    T = rc.calibration_horizon
    fams = [ev.conformal_family(region)]
    if region.kind == "mahalanobis":
        fams.append(ev.chebyshev_region(region.score.centers, region.score.shapes,
                                        rc["horizon.theta"], T, exp.system.nx))
    w_true, eta_true = noise_models(rc)
    if w_true.kind == "gaussian":
        Sigma_eta = None
        if exp.mode == ctl.OUTPUT_FEEDBACK:
            Sigma_eta = eta_true.covariance
        fams.append(ev.gaussian_truth_region(w_true.covariance, exp.system, region.level, T,
                                             Sigma_eta))
    return fams


def evaluate(exp: Experiment, seed=None, baselines=True, n_test=None):
    """Monte Carlo report as a plain dict, plus records and region families."""
    rc = exp.rc
    seed = rc["data.seeds.test"] if seed is None else seed
    n_test = rc["evaluation.n_test"] if n_test is None else n_test
    report, records = ev.run_monte_carlo(exp.cfg, exp.x0, n_test, seed, exp.w_model,
                                         exp.eta_model, workers=rc["evaluation.workers"])
    payload = report.to_dict()
    payload["calibration"] = calibration_summary(exp)
    fams = []
    if baselines:
        fams = baseline_families(exp)
        rows = ev.compare_regions(fams)
        payload["baselines"] = {"summary": ev.summarize_comparison(rows, fams),
                                "per_step": rows}
    else:
        payload.pop("baselines")
    payload.pop("policies")
    return payload, records, fams


def calibration_summary(exp: Experiment):
    region = exp.region
    out = {"kind": region.kind, "qhat": region.qhat, "k": region.k, "M_cal": region.M_cal,
           "M_fit": len(region.fit_indices), "level": region.level,
           "horizon": region.horizon}
    if region.pac is not None:
        out["pac_epsilon"], out["theta_tilde"] = region.pac
    return out

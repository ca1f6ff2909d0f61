"""Monte Carlo closed-loop evaluation and baseline region comparison.

Every rollout draws its noise from its own child of one SeedSequence, so a
batch is reproducible from a single integer regardless of execution order,
and aggregates are order-independent compensated sums.
"""
import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import gammaincinv

from . import controller as ctl
from .calibration import ConfidenceRegion
from .data import NoiseModel
from .exceptions import DimensionError, SmpcError
from .geometry import Ellipsoid
from .system import LtiSystem, check_schur

IDENTITY_TOL = 1e-10


@dataclass
class ClosedLoopRecord:
    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    scores: np.ndarray
    cost: float
    score_ok: bool
    state_ok: bool
    input_ok: bool
    candidates_ok: bool
    fallbacks: int
    identity_residual: float
    xhat: Optional[np.ndarray] = None
    diagnostics: Optional[list] = None

    @property
    def errors(self):
        return self.x - self.z

    @property
    def estimation_errors(self):
        return None if self.xhat is None else self.x - self.xhat

    @property
    def nominal_errors(self):
        return None if self.xhat is None else self.xhat - self.z

    @property
    def implication_ok(self):
        """score within qhat implies joint state and input satisfaction."""
        return (not self.score_ok) or (self.state_ok and self.input_ok)


def _max_identity(a, b):
    return float(np.abs(a - b).max(initial=0.0))


def simulate_closed_loop(cfg: ctl.SmpcConfig, x0, w, eta=None, keep_diagnostics=False):
    """One rollout of N_bar steps driven by the realization ``w`` (and ``eta``)."""
    sys_ = cfg.system
    T = cfg.N_bar
    w = np.asarray(w, dtype=float)
    if w.shape[0] < T:
        raise DimensionError(f"realization has {w.shape[0]} steps, need {T}")
    output = cfg.mode == ctl.OUTPUT_FEEDBACK
    if output and (eta is None or len(eta) < T):
        raise DimensionError("output feedback rollout needs a noise realization")
    x = np.asarray(x0, dtype=float).reshape(sys_.nx)
    state = ctl.initial_state(cfg, x)
    xs = np.empty((T + 1, sys_.nx))
    zs = np.empty((T + 1, sys_.nx))
    us = np.empty((T, sys_.nu))
    xhats = np.empty((T + 1, sys_.nx)) if output else None
    xs[0], zs[0] = x, state.z
    # independent propagation of the error laws, for the pathwise identities
    e = np.zeros(sys_.nx)
    ehat = np.zeros(sys_.nx)
    ebar = np.zeros(sys_.nx)
    residual = 0.0
    candidates_ok, fallbacks, diags = True, 0, []
    cost = 0.0
    for t in range(T):
        if output:
            xhats[t] = state.xhat
            x_now = x

            def measurement(u, x_now=x_now, t=t):
                return sys_.C @ x_now + sys_.D @ u + eta[t]

            u, state, diag = ctl.control_step(cfg, state, measurement)
        else:
            u, state, diag = ctl.control_step(cfg, state, x)
        candidates_ok &= diag["candidate_feasible"] in (None, True)
        fallbacks += int(diag["fallback"])
        if keep_diagnostics:
            diags.append(diag)
        cost += cfg.cost.stage(x, u)
        if output:
            innovation = sys_.C @ ehat + eta[t]
            ehat, ebar = (sys_.A_L @ ehat + w[t] - sys_.L @ eta[t],
                          sys_.A_K @ ebar + sys_.L @ innovation)
        else:
            e = sys_.A_K @ e + w[t]
        x = sys_.A @ x + sys_.B @ u + w[t]
        us[t], xs[t + 1], zs[t + 1] = u, x, state.z
        if output:
            residual = max(residual, _max_identity(x - state.xhat, ehat),
                           _max_identity(state.xhat - state.z, ebar))
        else:
            residual = max(residual, _max_identity(x - state.z, e))
    if output:
        xhats[T] = state.xhat
    cost += cfg.cost.terminal(x)
    sf = cfg.region.score.truncated(T)
    scores = sf.step_values(xs[1:] - zs[1:])
    state_ok = bool(np.all(cfg.X.contains(xs[1:])))
    input_ok = bool(np.all(cfg.U.contains(us)))
    return ClosedLoopRecord(xs, us, zs, scores, float(cost), bool(scores.max() <= cfg.region.qhat),
                            state_ok, input_ok, bool(candidates_ok), fallbacks, residual, xhats,
                            diags if keep_diagnostics else None)


def rollout_seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


def draw_realization(seq, w_model: NoiseModel, eta_model: Optional[NoiseModel], T):
    """Disturbance and noise for one rollout from its own seed sequence."""
    rng = np.random.default_rng(seq)
    w = w_model.draw(rng, 1, T)[0]
    eta = None if eta_model is None else eta_model.draw(rng, 1, T)[0]
    return w, eta


def _rollout(args):
    cfg, x0, seq, w_model, eta_model, keep = args
    w, eta = draw_realization(seq, w_model, eta_model, cfg.N_bar)
    return simulate_closed_loop(cfg, x0, w, eta, keep)


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(job) for job in jobs]


def _mean_std(values):
    values = list(values)
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1) if n > 1 else 0.0
    return mean, math.sqrt(var)


@dataclass
class EvaluationReport:
    mode: str
    n_test: int
    seed: int
    coverage: float
    state_rate: float
    input_rate: float
    joint_rate: float
    implication_rate: float
    recursive_feasibility_rate: float
    fallbacks: int
    max_identity_residual: float
    cost_mean: float
    cost_std: float
    qhat: float
    level: float
    baselines: Optional[dict] = None
    policies: Optional[dict] = None

    def to_dict(self):
        return asdict(self)


def summarize(records: List[ClosedLoopRecord], cfg: ctl.SmpcConfig, seed) -> EvaluationReport:
    n = len(records)

    def rate(flag):
        return math.fsum(1.0 for r in records if flag(r)) / n

    cost_mean, cost_std = _mean_std(r.cost for r in records)
    return EvaluationReport(
        cfg.mode, n, int(seed), rate(lambda r: r.score_ok), rate(lambda r: r.state_ok),
        rate(lambda r: r.input_ok), rate(lambda r: r.state_ok and r.input_ok),
        rate(lambda r: r.implication_ok), rate(lambda r: r.candidates_ok),
        int(sum(r.fallbacks for r in records)),
        float(max(r.identity_residual for r in records)), cost_mean, cost_std,
        cfg.region.qhat, cfg.region.level)


def run_monte_carlo(cfg: ctl.SmpcConfig, x0, n_test, seed, w_model: NoiseModel,
                    eta_model: Optional[NoiseModel] = None, workers=1, keep_diagnostics=False):
    """``n_test`` independent rollouts; returns (report, records)."""
    if n_test < 1:
        raise SmpcError("n_test must be positive")
    if cfg.mode == ctl.OUTPUT_FEEDBACK and eta_model is None:
        raise DimensionError("output feedback evaluation needs a measurement-noise model")
    if cfg.mode == ctl.STATE_FEEDBACK:
        eta_model = None
    # fails loudly with the violated facets before any rollout is spent
    ctl.control_step(cfg, ctl.initial_state(cfg, x0), _probe(cfg, x0))
    jobs = [(cfg, x0, s, w_model, eta_model, keep_diagnostics)
            for s in rollout_seeds(seed, n_test)]
    records = _map(_rollout, jobs, workers)
    return summarize(records, cfg, seed), records


def _probe(cfg, x0):
    if cfg.mode == ctl.STATE_FEEDBACK:
        return np.asarray(x0, dtype=float)
    sys_ = cfg.system
    return lambda u: sys_.C @ np.asarray(x0, dtype=float) + sys_.D @ u


# -- baseline regions ------------------------------------------------------------

@dataclass
class RegionFamily:
    """Per-step ellipsoids {mu_t + r Sigma_t^(1/2) u}, t = 1..T."""

    name: str
    ellipsoids: List[Ellipsoid]
    squared_radius: float
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return len(self.ellipsoids)


def conformal_family(region: ConfidenceRegion, name="conformal"):
    ells = region.projections()
    return RegionFamily(name, ells, region.qhat ** 2, {"qhat": region.qhat, "k": region.k})


def chebyshev_radius_squared(n_x, theta, horizon):
    """n_x (N_bar + N) / theta: Chebyshev per step plus a union bound over the horizon."""
    if not 0 < theta < 1:
        raise SmpcError(f"theta must lie in (0, 1), got {theta}")
    if horizon < 1 or n_x < 1:
        raise SmpcError("horizon and n_x must be positive")
    return n_x * horizon / theta


def chebyshev_region(centers, shapes, theta, horizon, n_x):
    """Mean-variance baseline using the fitted moments."""
    p_tilde = chebyshev_radius_squared(n_x, theta, horizon)
    centers = np.asarray(centers, dtype=float)
    shapes = np.asarray(shapes, dtype=float)
    if centers.shape[0] < horizon:
        raise DimensionError(f"moments cover {centers.shape[0]} steps, need {horizon}")
    ells = [Ellipsoid(centers[t], shapes[t], math.sqrt(p_tilde)) for t in range(horizon)]
    return RegionFamily("chebyshev", ells, p_tilde, {"p_tilde": p_tilde})


def chi2_quantile(dof, p):
    """Chi-squared quantile; closed form for 2 degrees of freedom."""
    if not 0 <= p < 1:
        raise SmpcError(f"level must lie in [0, 1), got {p}")
    if dof == 2:
        return -2.0 * math.log1p(-p)
    return 2.0 * float(gammaincinv(dof / 2.0, p))


def error_covariances(sys_: LtiSystem, Sigma_w, horizon, Sigma_eta=None):
    """Exact covariance of e(t), t = 1..horizon, from e(0) = 0.

    With ``Sigma_eta`` the combined output-feedback error ehat + ebar is used,
    whose covariance follows from the stacked (ehat, ebar) recursion.
    """
    Sigma_w = np.atleast_2d(np.asarray(Sigma_w, dtype=float))
    nx = sys_.nx
    if Sigma_eta is None:
        F, Sig_in, Cmb = sys_.A_K, Sigma_w, np.eye(nx)
    else:
        L, C = sys_.L, sys_.C
        F = np.block([[sys_.A_L, np.zeros((nx, nx))], [L @ C, sys_.A_K]])
        G = np.block([[np.eye(nx), -L], [np.zeros((nx, nx)), L]])
        noise = np.block([[Sigma_w, np.zeros((nx, sys_.ny))],
                          [np.zeros((sys_.ny, nx)), np.atleast_2d(Sigma_eta)]])
        Sig_in = G @ noise @ G.T
        Cmb = np.hstack([np.eye(nx), np.eye(nx)])
    S = np.zeros_like(F)
    out = []
    for _ in range(horizon):
        S = F @ S @ F.T + Sig_in
        out.append(Cmb @ S @ Cmb.T)
    return np.array(out)


def gaussian_truth_region(Sigma_w, sys_: LtiSystem, level, horizon, Sigma_eta=None):
    """Per-step ellipsoids with exact covariances and chi-squared radius."""
    if not check_schur(sys_.A_K).stable:
        raise SmpcError("A + BK must be Schur")
    r2 = chi2_quantile(sys_.nx, level)
    shapes = error_covariances(sys_, Sigma_w, horizon, Sigma_eta)
    ells = [Ellipsoid(np.zeros(sys_.nx), S, math.sqrt(r2)) for S in shapes]
    return RegionFamily("gaussian", ells, r2, {"chi2": r2})


def _inside(ell: Ellipsoid, points, coords=(0, 1)):
    """Membership of 2-D points in the projection of ``ell`` onto ``coords``."""
    i, j = coords
    S = ell.shape[np.ix_([i, j], [i, j])]
    c = ell.center[[i, j]]
    proj = Ellipsoid(c, S, ell.radius)
    return np.array([proj.contains(p, tol=1e-9) for p in points])


def compare_regions(families: List[RegionFamily], reference=0, n_points=64):
    """Per-step volume proxies, radius scales, ratios against the reference
    family and the share of the reference's boundary inside each other family."""
    if not families:
        raise SmpcError("no regions to compare")
    T = families[0].horizon
    if any(f.horizon != T for f in families):
        raise DimensionError("regions are defined on different horizons")
    ref = families[reference]
    rows = []
    for t in range(T):
        base = ref.ellipsoids[t]
        boundary = base.boundary(n_points)
        row = {"t": t + 1}
        for fam in families:
            ell = fam.ellipsoids[t]
            vol, scale = ell.volume_proxy(), ell.radius_scale()
            row[f"{fam.name}_volume"] = vol
            row[f"{fam.name}_radius"] = scale
            if fam is not ref:
                row[f"{ref.name}/{fam.name}_volume"] = (base.volume_proxy() / vol
                                                        if vol > 0 else math.inf)
                row[f"{ref.name}/{fam.name}_radius"] = (base.radius_scale() / scale
                                                        if scale > 0 else math.inf)
                row[f"{ref.name}_in_{fam.name}"] = float(_inside(ell, boundary).mean())
        rows.append(row)
    return rows


def summarize_comparison(rows, families, reference=0):
    ref = families[reference].name
    out = {f.name: {"squared_radius": f.squared_radius, **f.meta} for f in families}
    for f in families:
        if f.name == ref:
            continue
        for key in ("radius", "volume"):
            vals = [r[f"{ref}/{f.name}_{key}"] for r in rows]
            out[f.name][f"{ref}/{f.name}_{key}_min"] = float(min(vals))
            out[f.name][f"{ref}/{f.name}_{key}_max"] = float(max(vals))
        out[f.name][f"{ref}_boundary_inside_mean"] = float(
            np.mean([r[f"{ref}_in_{f.name}"] for r in rows]))
    return out


# -- policy comparison ---------------------------------------------------------------

def replay_tube_policy(cfg: ctl.SmpcConfig, plan: ctl.TubePlan, x0, w):
    sys_ = cfg.system
    x = np.asarray(x0, dtype=float).reshape(sys_.nx)
    cost = 0.0
    xs = [x]
    for t in range(cfg.N_bar):
        u = plan.control(sys_.K, t, x)
        cost += cfg.cost.stage(x, u)
        x = sys_.A @ x + sys_.B @ u + w[t]
        xs.append(x)
    return cost + cfg.cost.terminal(x), np.array(xs)


@dataclass
class PolicyComparison:
    n_test: int
    closed_loop_mean: float
    open_loop_mean: float
    mean_difference: float
    standard_error: float
    reduction: float

    def to_dict(self):
        return asdict(self)


def compare_policies(cfg: ctl.SmpcConfig, x0, n_test, seed, w_model: NoiseModel,
                     closed_loop: Optional[List[ClosedLoopRecord]] = None, workers=1):
    """Paired costs of the receding-horizon controller and the one-shot tube
    policy on identical disturbance realizations.

    ``closed_loop`` may pass records from :func:`run_monte_carlo` produced
    with the same seed and model, which are then not recomputed.
    """
    if cfg.mode != ctl.STATE_FEEDBACK:
        raise SmpcError("policy comparison is defined for state feedback")
    plan = ctl.open_loop_tube_policy(cfg, x0)
    seqs = rollout_seeds(seed, n_test)
    if closed_loop is None:
        _, closed_loop = run_monte_carlo(cfg, x0, n_test, seed, w_model, workers=workers)
    if len(closed_loop) != n_test:
        raise SmpcError("closed-loop records do not match n_test")
    closed, opened = [], []
    for seq, rec in zip(seqs, closed_loop):
        w, _ = draw_realization(seq, w_model, None, cfg.N_bar)
        open_cost, _ = replay_tube_policy(cfg, plan, x0, w)
        closed.append(rec.cost)
        opened.append(open_cost)
    return paired_summary(closed, opened)


def paired_summary(closed, opened):
    diffs = [o - c for c, o in zip(closed, opened)]
    n = len(diffs)
    mean_diff, std_diff = _mean_std(diffs)
    closed_mean = math.fsum(closed) / n
    open_mean = math.fsum(opened) / n
    return PolicyComparison(n, closed_mean, open_mean, mean_diff, std_diff / math.sqrt(n),
                            mean_diff / open_mean if open_mean else 0.0)


# -- output files ------------------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_records_csv(path, records: List[ClosedLoopRecord]):
    write_csv(path, ["rollout", "cost", "max_score", "score_ok", "state_ok", "input_ok",
                     "candidates_ok", "fallbacks"],
              [(i, r.cost, r.scores.max(), r.score_ok, r.state_ok, r.input_ok,
                r.candidates_ok, r.fallbacks) for i, r in enumerate(records)])


def write_trajectory_csv(path, record: ClosedLoopRecord):
    nx, nu = record.x.shape[1], record.u.shape[1]
    header = (["t"] + [f"x{i + 1}" for i in range(nx)] + [f"z{i + 1}" for i in range(nx)]
              + [f"u{i + 1}" for i in range(nu)] + ["score"])
    if record.xhat is not None:
        header += [f"xhat{i + 1}" for i in range(nx)]
    rows = []
    for t in range(record.x.shape[0]):
        u = record.u[t] if t < record.u.shape[0] else [math.nan] * nu
        s = record.scores[t - 1] if t >= 1 else math.nan
        row = [t, *record.x[t], *record.z[t], *u, s]
        if record.xhat is not None:
            row += list(record.xhat[t])
        rows.append(row)
    write_csv(path, header, rows)


DIAG_FIELDS = ("t", "status", "iterations", "cost", "candidate_feasible", "candidate_residual",
               "fallback", "min_slack_state", "min_slack_input", "min_slack_terminal", "active")


def write_diagnostics_csv(path, diagnostics):
    write_csv(path, DIAG_FIELDS, [[d.get(k) for k in DIAG_FIELDS] for d in diagnostics])


def write_plot_data(out_dir, families: List[RegionFamily], records: List[ClosedLoopRecord],
                    n_points=64, max_rollouts=None):
    """Ellipse boundary polylines per family and step, plus score-vs-t series."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for fam in families:
        for t, ell in enumerate(fam.ellipsoids, start=1):
            for k, (a, b) in enumerate(ell.boundary(n_points)):
                rows.append((fam.name, t, k, a, b))
    write_csv(os.path.join(out_dir, "region_boundaries.csv"),
              ["region", "t", "k", "e1", "e2"], rows)
    chosen = records if max_rollouts is None else records[:max_rollouts]
    rows = []
    for i, r in enumerate(chosen):
        for t, s in enumerate(r.scores, start=1):
            e = r.errors[t]
            rows.append((i, t, s, r.score_ok, e[0], e[1] if e.size > 1 else math.nan))
    write_csv(os.path.join(out_dir, "scores.csv"),
              ["rollout", "t", "score", "within_qhat", "e1", "e2"], rows)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as f:
        json.dump(_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")


def format_text(payload: Dict, indent=0):
    """Aligned ``key : value`` lines, nested dicts indented."""
    lines = []
    width = max((len(str(k)) for k in payload), default=0)
    pad = " " * indent
    for key in payload:
        value = payload[key]
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.extend(format_text(value, indent + 2))
        elif isinstance(value, list) and value and isinstance(value[0], dict):
            lines.append(f"{pad}{key}:")
            lines.extend(_table(value, indent + 2))
        else:
            lines.append(f"{pad}{str(key).ljust(width)} : {_fmt(value)}")
    return lines


def _table(rows, indent):
    cols = list(rows[0])
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    pad = " " * indent
    out = [pad + "  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    out += [pad + "  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return out

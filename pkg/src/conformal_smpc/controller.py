"""Indirect-feedback stochastic MPC for state and output feedback.

Constraints act on the nominal system only and are fixed offline by the
tightened sets, so the feasible set of the online problem never depends on
the measurement. Feedback enters through the cost, which averages the stage
cost over sampled error trajectories started from the current error.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional

import numpy as np

from . import qp as qpsolver
from .calibration import ConfidenceRegion
from .exceptions import (DimensionError, EmptySetError, InitialInfeasibilityError,
                         SmpcError)
from .geometry import (HalfspacePolytope, TerminalSpec, check_terminal_invariance,
                       horizon_intersection, tighten, tighten_inputs)
from .system import CostSpec, LtiSystem

log = logging.getLogger(__name__)

STATE_FEEDBACK = "state_feedback"
OUTPUT_FEEDBACK = "output_feedback"
CANDIDATE_TOL = 1e-8


@dataclass(frozen=True)
class SmpcConfig:
    """Everything the online controller needs; built by :func:`make_config`.

    ``Z[t]`` and ``V[t]`` are the tightened state and input sets for absolute
    time t, with ``Z[0] = X`` and ``V[0] = U`` because the initial error is zero.
    """

    system: LtiSystem
    cost: CostSpec
    N: int
    N_bar: int
    region: ConfidenceRegion
    X: HalfspacePolytope
    U: HalfspacePolytope
    Z: List[HalfspacePolytope]
    V: List[HalfspacePolytope]
    Z_inf: HalfspacePolytope
    V_inf: HalfspacePolytope
    terminal: TerminalSpec
    mode: str
    scenarios_w: np.ndarray
    scenarios_eta: Optional[np.ndarray] = None

    @property
    def S(self):
        return self.scenarios_w.shape[0]

    @cached_property
    def _structure(self):
        return {}


def make_config(system: LtiSystem, cost: CostSpec, X: HalfspacePolytope,
                U: HalfspacePolytope, region: ConfidenceRegion, N: int, N_bar: int,
                scenarios_w, scenarios_eta=None, terminal: Optional[TerminalSpec] = None,
                mode=STATE_FEEDBACK) -> SmpcConfig:
    """Tighten constraints along the region's projections and validate the
    terminal ingredients."""
    if mode not in (STATE_FEEDBACK, OUTPUT_FEEDBACK):
        raise SmpcError(f"unknown mode {mode!r}")
    if not 1 <= N <= N_bar:
        raise SmpcError(f"need 1 <= N <= N_bar, got N={N}, N_bar={N_bar}")
    if X.dim != system.nx or U.dim != system.nu:
        raise DimensionError("constraint sets do not match the system dimensions")
    if not (X.contains_origin_interior() and U.contains_origin_interior()):
        raise SmpcError("X and U must contain the origin in their interior")
    if region.horizon < N_bar + N - 1:
        raise SmpcError(
            f"region covers {region.horizon} steps; the controller needs {N_bar + N - 1}")
    terminal = terminal or TerminalSpec()
    scenarios_w = np.asarray(scenarios_w, dtype=float)
    if scenarios_w.ndim != 3 or scenarios_w.shape[2] != system.nx:
        raise DimensionError("scenario disturbances must have shape (S, T, nx)")
    if scenarios_w.shape[1] < N_bar + N - 1:
        raise DimensionError(
            f"scenario trajectories need at least {N_bar + N - 1} steps")
    if mode == OUTPUT_FEEDBACK:
        if not system.has_observer:
            raise DimensionError("output feedback needs C and L")
        if scenarios_eta is None:
            raise DimensionError("output feedback needs measurement-noise scenarios")
        scenarios_eta = np.asarray(scenarios_eta, dtype=float)
        if scenarios_eta.shape[:2] != scenarios_w.shape[:2]:
            raise DimensionError("disturbance and noise scenarios are not aligned")

    Z, V = [X], [U]
    for t in range(1, region.horizon + 1):
        ell = region.project(t)
        Zt = tighten(X, ell)
        Vt = tighten_inputs(U, system.K, ell)
        for name, P in (("Z", Zt), ("V", Vt)):
            if P.empty:
                raise EmptySetError(f"tightened set {name}_{t} is empty")
        Z.append(Zt)
        V.append(Vt)
    Z_inf = horizon_intersection(Z[1:])
    V_inf = horizon_intersection(V[1:])
    report = check_terminal_invariance(terminal, system.A, system.B, Z_inf, V_inf)
    if not (report.invariant and report.inside_state_set and report.law_inside_input_set):
        raise SmpcError(f"terminal ingredients violate the invariance assumption: {report}")
    return SmpcConfig(system, cost, int(N), int(N_bar), region, X, U, Z, V, Z_inf, V_inf,
                      terminal, mode, scenarios_w, scenarios_eta)


@dataclass(frozen=True)
class ControllerState:
    t: int
    z: np.ndarray
    previous: Optional[np.ndarray] = None
    scen_e: Optional[np.ndarray] = None
    scen_ehat: Optional[np.ndarray] = None
    scen_ebar: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None


def initial_state(cfg: SmpcConfig, x0) -> ControllerState:
    """z(0) = x(0); for output feedback also xhat(0) = x(0)."""
    x0 = np.asarray(x0, dtype=float).reshape(cfg.system.nx)
    zeros = np.zeros((cfg.S, cfg.system.nx))
    if cfg.mode == OUTPUT_FEEDBACK:
        return ControllerState(0, x0.copy(), None, None, zeros, zeros.copy(), x0.copy())
    return ControllerState(0, x0.copy(), None, zeros)


# -- QP assembly ---------------------------------------------------------------

def _layout(nx, nu, N):
    nz = (N + 1) * nx
    return nz, nz + N * nu


def _structure(cfg: SmpcConfig, N: int, t: int):
    """Equality and inequality matrices for horizon N at time t (cached)."""
    key = (N, t)
    cache = cfg._structure
    if key in cache:
        return cache[key]
    sys_ = cfg.system
    nx, nu = sys_.nx, sys_.nu
    nz, n = _layout(nx, nu, N)
    origin = cfg.terminal.kind == "origin"
    n_eq = nx * (N + 1) + (nx if origin else 0)
    A_eq = np.zeros((n_eq, n))
    A_eq[:nx, :nx] = np.eye(nx)
    for i in range(N):
        r = nx * (i + 1)
        A_eq[r:r + nx, (i + 1) * nx:(i + 2) * nx] = np.eye(nx)
        A_eq[r:r + nx, i * nx:(i + 1) * nx] = -sys_.A
        A_eq[r:r + nx, nz + i * nu:nz + (i + 1) * nu] = -sys_.B
    if origin:
        A_eq[-nx:, N * nx:(N + 1) * nx] = np.eye(nx)
    blocks, offsets, names = [], [], []
    for i in range(N):
        P = cfg.Z[t + i]
        row = np.zeros((P.n_facets, n))
        row[:, i * nx:(i + 1) * nx] = P.A
        blocks.append(row)
        offsets.append(P.b)
        names += [f"Z_{t + i}[{s}]" for s in P.names]
    for i in range(N):
        P = cfg.V[t + i]
        row = np.zeros((P.n_facets, n))
        row[:, nz + i * nu:nz + (i + 1) * nu] = P.A
        blocks.append(row)
        offsets.append(P.b)
        names += [f"V_{t + i}[{s}]" for s in P.names]
    if not origin:
        P = cfg.terminal.polytope
        row = np.zeros((P.n_facets, n))
        row[:, N * nx:(N + 1) * nx] = P.A
        blocks.append(row)
        offsets.append(P.b)
        names += [f"Z_f[{s}]" for s in P.names]
    families = np.concatenate([np.full(N * cfg.Z[t].n_facets, 0),
                               np.full(sum(cfg.V[t + i].n_facets for i in range(N)), 1),
                               np.full(0 if origin else cfg.terminal.polytope.n_facets, 2)])
    structure = (A_eq, np.vstack(blocks), np.concatenate(offsets), names, families)
    if len(cache) < 4096:
        cache[key] = structure
    return structure


def _factor_cache(cfg: SmpcConfig, N: int):
    """H and A_eq depend only on N, so their factorizations are shared across steps."""
    return cfg._structure.setdefault(("factors", N), {})


def _cost_matrices(cfg: SmpcConfig, N: int, x_offsets, u_offsets):
    """Hessian, gradient and constant of the scenario-averaged cost.

    ``x_offsets`` (S, N+1, nx) are added to z_i and ``u_offsets`` (S, N, nu)
    to v_i to obtain the sampled states and inputs.
    """
    Q, R, Pf = cfg.cost.Q, cfg.cost.R, cfg.cost.P_f
    nx, nu = cfg.system.nx, cfg.system.nu
    nz, n = _layout(nx, nu, N)
    H = np.zeros((n, n))
    g = np.zeros(n)
    a_bar = x_offsets.mean(axis=0)
    b_bar = u_offsets.mean(axis=0)
    for i in range(N):
        H[i * nx:(i + 1) * nx, i * nx:(i + 1) * nx] = 2 * Q
        g[i * nx:(i + 1) * nx] = 2 * Q @ a_bar[i]
        s = slice(nz + i * nu, nz + (i + 1) * nu)
        H[s, s] = 2 * R
        g[s] = 2 * R @ b_bar[i]
    H[N * nx:(N + 1) * nx, N * nx:(N + 1) * nx] = 2 * Pf
    g[N * nx:(N + 1) * nx] = 2 * Pf @ a_bar[N]
    c = (np.einsum("sti,ij,stj->s", x_offsets[:, :N], Q, x_offsets[:, :N]).mean()
         + np.einsum("sti,ij,stj->s", u_offsets, R, u_offsets).mean()
         + np.einsum("si,ij,sj->s", x_offsets[:, N], Pf, x_offsets[:, N]).mean())
    return H, g, float(c)


def scenario_cost(cfg: SmpcConfig, xi, x_offsets, u_offsets, N=None):
    """Explicit sample average of the horizon cost; the reference the QP must reproduce."""
    N = cfg.N if N is None else N
    nx, nu = cfg.system.nx, cfg.system.nu
    nz, _ = _layout(nx, nu, N)
    z = np.asarray(xi[:nz]).reshape(N + 1, nx)
    v = np.asarray(xi[nz:]).reshape(N, nu)
    total = 0.0
    for a, b in zip(x_offsets, u_offsets):
        x = z + a
        u = v + b
        total += sum(cfg.cost.stage(x[i], u[i]) for i in range(N)) + cfg.cost.terminal(x[N])
    return total / len(x_offsets)


def state_feedback_offsets(cfg: SmpcConfig, t: int, e0, N=None):
    """Sampled errors e^j_i, i = 0..N, from e0 driven by scenario windows at t."""
    N = cfg.N if N is None else N
    A_K, K = cfg.system.A_K, cfg.system.K
    w = cfg.scenarios_w[:, t:t + N]
    if w.shape[1] < N:
        raise DimensionError(f"scenario data too short for window starting at {t}")
    e = np.empty((cfg.S, N + 1, cfg.system.nx))
    e[:, 0] = e0
    for i in range(N):
        e[:, i + 1] = e[:, i] @ A_K.T + w[:, i]
    return e, e[:, :N] @ K.T


def output_feedback_offsets(cfg: SmpcConfig, t: int, ehat0, ebar0, N=None):
    """Sampled (ehat + ebar, K ebar) over the horizon from the given anchors."""
    N = cfg.N if N is None else N
    sys_ = cfg.system
    A_L, A_K, L, C, K = sys_.A_L, sys_.A_K, sys_.L, sys_.C, sys_.K
    w = cfg.scenarios_w[:, t:t + N]
    eta = cfg.scenarios_eta[:, t:t + N]
    if w.shape[1] < N:
        raise DimensionError(f"scenario data too short for window starting at {t}")
    S, nx = cfg.S, sys_.nx
    ehat = np.empty((S, N + 1, nx))
    ebar = np.empty((S, N + 1, nx))
    ehat[:, 0] = ehat0
    ebar[:, 0] = ebar0
    for i in range(N):
        ehat[:, i + 1] = ehat[:, i] @ A_L.T + w[:, i] - eta[:, i] @ L.T
        ebar[:, i + 1] = ebar[:, i] @ A_K.T + (ehat[:, i] @ C.T + eta[:, i]) @ L.T
    return ehat + ebar, ebar[:, :N] @ K.T, ehat, ebar


def _assemble(cfg: SmpcConfig, t: int, z_t, x_offsets, u_offsets, N):
    A_eq, A_in, b_in, names, families = _structure(cfg, N, t)
    nx = cfg.system.nx
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[:nx] = z_t
    H, g, c = _cost_matrices(cfg, N, x_offsets, u_offsets)
    problem = qpsolver.QuadraticProgram(H, g, A_eq, b_eq, A_in, b_in, c)
    problem.names = names
    problem.families = families
    problem.initial = np.asarray(z_t, dtype=float)
    return problem


def build_qp_state_feedback(cfg: SmpcConfig, state: ControllerState, x, N=None):
    N = cfg.N if N is None else N
    e0 = np.asarray(x, dtype=float) - state.z
    x_off, u_off = state_feedback_offsets(cfg, state.t, e0, N)
    return _assemble(cfg, state.t, state.z, x_off, u_off, N)


def build_qp_output_feedback(cfg: SmpcConfig, state: ControllerState, xhat, N=None):
    """The true error is unmeasurable; sampled estimation errors come from the
    persisted scenario states and the nominal error is anchored at xhat - z."""
    N = cfg.N if N is None else N
    ebar0 = np.asarray(xhat, dtype=float) - state.z
    x_off, u_off, _, _ = output_feedback_offsets(cfg, state.t, state.scen_ehat, ebar0, N)
    return _assemble(cfg, state.t, state.z, x_off, u_off, N)


# -- closed loop -------------------------------------------------------------------

def split_solution(cfg: SmpcConfig, xi, N=None):
    N = cfg.N if N is None else N
    nx, nu = cfg.system.nx, cfg.system.nu
    nz, _ = _layout(nx, nu, N)
    return np.asarray(xi[:nz]).reshape(N + 1, nx), np.asarray(xi[nz:]).reshape(N, nu)


def shifted_candidate(cfg: SmpcConfig, previous):
    """(z_1..z_N, A z_N + B pi_f(z_N)) and (v_1..v_{N-1}, pi_f(z_N))."""
    sys_ = cfg.system
    z, v = split_solution(cfg, previous)
    zN = z[-1]
    vf = cfg.terminal.law(zN)
    vf = np.zeros(sys_.nu) if vf is None else vf
    z_new = np.vstack([z[1:], sys_.A @ zN + sys_.B @ vf])
    v_new = np.vstack([v[1:], vf])
    return np.concatenate([z_new.ravel(), v_new.ravel()])


def candidate_residual(problem: qpsolver.QuadraticProgram, xi):
    """Largest equality or inequality violation of ``xi``."""
    eq = np.abs(problem.A_eq @ xi - problem.b_eq).max(initial=0.0)
    ineq = (problem.A_in @ xi - problem.b_in).max(initial=-np.inf)
    return float(max(eq, ineq, 0.0))


def diagnose_infeasibility(problem: qpsolver.QuadraticProgram, top=5):
    """Names of violated constraints: first those the fixed initial state
    violates by itself, then those an L1 elastic relaxation has to violate,
    largest violation first."""
    from scipy.optimize import linprog

    n = problem.n
    m = problem.A_in.shape[0]
    named = []
    z0 = getattr(problem, "initial", None)
    if z0 is not None:
        k = len(z0)
        own = ~np.any(problem.A_in[:, k:], axis=1)
        gap = problem.A_in[:, :k] @ z0 - problem.b_in
        named = [problem.names[i] for i in np.flatnonzero(own & (gap > 1e-9))]
    c = np.concatenate([np.zeros(n), np.ones(m)])
    res = linprog(c, A_ub=np.hstack([problem.A_in, -np.eye(m)]), b_ub=problem.b_in,
                  A_eq=np.hstack([problem.A_eq, np.zeros((problem.A_eq.shape[0], m))]),
                  b_eq=problem.b_eq, bounds=[(None, None)] * n + [(0.0, None)] * m,
                  method="highs")
    if res.status != 0:
        return named or ["nominal dynamics / initial-state equalities"]
    violation = res.x[n:]
    order = np.argsort(-violation)[:top]
    return named + [problem.names[i] for i in order
                    if violation[i] > 1e-9 and problem.names[i] not in named]


def _min_slack(problem, xi, families):
    slack = problem.b_in - problem.A_in @ xi
    out = {}
    for code, name in ((0, "state"), (1, "input"), (2, "terminal")):
        mask = families == code
        out[f"min_slack_{name}"] = float(slack[mask].min()) if mask.any() else np.nan
    return out


def solve_step(cfg: SmpcConfig, state: ControllerState, problem):
    """Solve the step QP with the shifted candidate as certified warm start."""
    diag = {"t": state.t, "candidate_feasible": None, "candidate_residual": np.nan,
            "fallback": False}
    candidate = None
    if state.previous is not None:
        candidate = shifted_candidate(cfg, state.previous)
        resid = candidate_residual(problem, candidate)
        diag["candidate_residual"] = resid
        diag["candidate_feasible"] = resid <= CANDIDATE_TOL
    sol = qpsolver.solve(problem, x0=candidate, cache=_factor_cache(cfg, cfg.N))
    diag.update(status=sol.status, iterations=sol.iterations, cost=sol.objective,
                active=";".join(problem.names[i] for i in sol.active))
    if sol.optimal:
        xi = sol.x
    elif state.t == 0 or candidate is None:
        raise InitialInfeasibilityError(
            f"SMPC problem infeasible at t={state.t} ({sol.status})",
            diagnose_infeasibility(problem))
    else:
        log.error("QP %s at t=%d despite recursive feasibility; applying the shifted "
                  "candidate", sol.status, state.t)
        xi = candidate
        diag["fallback"] = True
        diag["cost"] = problem.objective(xi)
    diag.update(_min_slack(problem, xi, problem.families))
    return xi, diag


def control_step(cfg: SmpcConfig, state: ControllerState, measurement):
    """One closed-loop step.

    State feedback: ``measurement`` is x(t). Output feedback: it is y(t), or a
    callable u -> y(t) when the output has feedthrough (D != 0).
    Returns (u, next_state, diagnostics).
    """
    sys_ = cfg.system
    if cfg.mode == STATE_FEEDBACK:
        x = np.asarray(measurement, dtype=float).reshape(sys_.nx)
        problem = build_qp_state_feedback(cfg, state, x)
        xi, diag = solve_step(cfg, state, problem)
        z, v = split_solution(cfg, xi)
        u = sys_.K @ (x - state.z) + v[0]
        w_t = cfg.scenarios_w[:, state.t]
        scen_e = state.scen_e @ sys_.A_K.T + w_t
        nxt = ControllerState(state.t + 1, z[1].copy(), xi, scen_e)
        return u, nxt, diag

    xhat = state.xhat
    problem = build_qp_output_feedback(cfg, state, xhat)
    xi, diag = solve_step(cfg, state, problem)
    z, v = split_solution(cfg, xi)
    u = sys_.K @ (xhat - state.z) + v[0]
    y = measurement(u) if callable(measurement) else np.asarray(measurement, dtype=float)
    innovation = y - sys_.C @ xhat - sys_.D @ u
    xhat_next = sys_.A @ xhat + sys_.B @ u + sys_.L @ innovation
    w_t = cfg.scenarios_w[:, state.t]
    eta_t = cfg.scenarios_eta[:, state.t]
    ehat = state.scen_ehat
    scen_ehat = ehat @ sys_.A_L.T + w_t - eta_t @ sys_.L.T
    scen_ebar = state.scen_ebar @ sys_.A_K.T + (ehat @ sys_.C.T + eta_t) @ sys_.L.T
    nxt = ControllerState(state.t + 1, z[1].copy(), xi, None, scen_ehat, scen_ebar, xhat_next)
    return u, nxt, diag


@dataclass(frozen=True)
class TubePlan:
    z: np.ndarray
    v: np.ndarray
    objective: float

    def control(self, K, t, x):
        return K @ (np.asarray(x, dtype=float) - self.z[t]) + self.v[t]


def open_loop_tube_policy(cfg: SmpcConfig, x0) -> TubePlan:
    """Solve once at t = 0 over the whole horizon N_bar (comparison baseline)."""
    x0 = np.asarray(x0, dtype=float).reshape(cfg.system.nx)
    N = cfg.N_bar
    x_off, u_off = state_feedback_offsets(cfg, 0, np.zeros(cfg.system.nx), N)
    problem = _assemble(cfg, 0, x0, x_off, u_off, N)
    sol = qpsolver.solve(problem, cache=_factor_cache(cfg, N))
    if not sol.optimal:
        raise InitialInfeasibilityError(
            f"open-loop tube problem infeasible ({sol.status})", diagnose_infeasibility(problem))
    z, v = split_solution(cfg, sol.x, N)
    return TubePlan(z, v, sol.objective)

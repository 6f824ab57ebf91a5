"""Inexact primal-dual interior point method for the penalized relaxation.

The barrier subproblem for a fixed penalty parameter ``eps`` is

    min ½|y - y_d|²_M + (1/eps) Σ u_i (1 - u_i)
    s.t. state equation, 1ᵀu + z = S, 0 ≤ u ≤ 1, z ≥ 0

with log barriers on the bounds.  Each outer iteration takes one Newton
step, solved by GMRES with a block-triangular preconditioner to a tolerance
tied to the barrier parameter, and then shrinks the barrier parameter.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from mipdeco.fem import nonlinear_residual_and_jacobian
from mipdeco.linalg import SaddleSystem, factorize, gmres, saddle_preconditioner
from mipdeco.model import IterateX, MipdecoProblem, lift_control

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class IpmConfig:
    tol: float = 1e-6
    mu0: float = 1.0
    mu_min: float = 1e-15
    mu_factor: float = 0.1
    gamma: float = 1e-6
    eta_max: float = 1e-1
    eta_min: float = 1e-10
    boundary_fraction: float = 0.995
    max_iters: int = 60
    gmres_max_iters: int = 400
    u_margin: float = 0.01
    z_min: float = 0.1
    max_backtracks: int = 10

    def __post_init__(self):
        for name in ("tol", "mu0", "mu_min", "mu_factor", "gamma", "eta_max", "eta_min"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.boundary_fraction < 1:
            raise ValueError("boundary_fraction must lie in (0, 1)")

    def gmres_tolerance(self, mu: float) -> float:
        return max(min(self.eta_max, mu), self.eta_min)


@dataclass
class IpmState:
    y: np.ndarray
    u: np.ndarray
    z: float
    p: np.ndarray
    q: float
    lam0: np.ndarray
    lam1: np.ndarray
    lamz: float
    mu: float

    def is_interior(self) -> bool:
        return bool(
            np.all(self.u > 0) and np.all(self.u < 1) and self.z > 0
            and np.all(self.lam0 > 0) and np.all(self.lam1 > 0) and self.lamz > 0
        )


@dataclass
class Direction:
    dy: np.ndarray
    du: np.ndarray
    dz: float
    dp: np.ndarray
    dq: float
    dlam0: np.ndarray
    dlam1: np.ndarray
    dlamz: float


@dataclass
class Residuals:
    xi_p: np.ndarray
    xi_d: np.ndarray
    xi_c: np.ndarray

    def norms(self) -> tuple[float, float, float]:
        return (
            float(np.linalg.norm(self.xi_p)),
            float(np.linalg.norm(self.xi_d)),
            float(np.linalg.norm(self.xi_c)),
        )

    @property
    def max_norm(self) -> float:
        return max(self.norms())


@dataclass
class IpmTrace:
    eps: float
    iterations: int = 0
    gmres_iterations: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    mu_values: list = field(default_factory=list)
    converged: bool = False
    max_iters_reached: bool = False
    linear_solver_failures: int = 0

    @property
    def average_gmres(self) -> float:
        if not self.gmres_iterations:
            return 0.0
        return float(np.mean(self.gmres_iterations))

    @property
    def final_residual(self) -> float:
        return self.residual_norms[-1] if self.residual_norms else math.inf


def _inv_eps(eps: float) -> float:
    return 0.0 if math.isinf(eps) else 1.0 / eps


def _state_jacobians(problem: MipdecoProblem, y, u):
    """Return ``(F(y, u), F_y, F_u)``; for linear PDEs ``F_y = K``."""
    sys = problem.system
    if sys.is_linear:
        F = sys.stiffness @ y - sys.mass_phi @ u
        return F, sys.stiffness, -sys.mass_phi
    return nonlinear_residual_and_jacobian(sys, y, u)


def residuals(state: IpmState, problem: MipdecoProblem, eps: float, mu: float | None = None) -> Residuals:
    """Primal/dual feasibilities and complementarity gap at barrier ``mu``.

    ``mu=None`` uses the state's own barrier parameter; ``mu=0`` measures
    the plain complementarity products.
    """
    mu = state.mu if mu is None else mu
    sys = problem.system
    F, F_y, F_u = _state_jacobians(problem, state.y, state.u)
    xi_p = np.concatenate([F, [state.u.sum() + state.z - problem.S]])
    xi_d = np.concatenate(
        [
            sys.mass @ state.y - problem.mass_y_d + F_y.T @ state.p,
            _inv_eps(eps) * (1.0 - 2.0 * state.u) + F_u.T @ state.p + state.q - state.lam0 + state.lam1,
            [state.q - state.lamz],
        ]
    )
    xi_c = np.concatenate(
        [state.u * state.lam0 - mu, (1.0 - state.u) * state.lam1 - mu, [state.z * state.lamz - mu]]
    )
    return Residuals(xi_p, xi_d, xi_c)


def convexified_diagonal(u, lam0, lam1, eps: float, gamma: float) -> np.ndarray:
    """``-(2/eps) + Θ_u`` with entries below ``gamma`` lifted to ``gamma``."""
    theta = lam0 / u + lam1 / (1.0 - u)
    d = theta - 2.0 * _inv_eps(eps)
    return np.where(d < gamma, gamma, d)


def assemble_newton_system(state: IpmState, problem: MipdecoProblem, eps: float, gamma: float) -> SaddleSystem:
    """Reduced Newton system after eliminating the bound multipliers.

    The right-hand side targets the perturbed complementarity ``u λ = μ``;
    it coincides with the plain negated KKT residual whenever the
    multipliers already satisfy it.
    """
    sys = problem.system
    y, u, z, p, q, mu = state.y, state.u, state.z, state.p, state.q, state.mu
    F, F_y, F_u = _state_jacobians(problem, y, u)
    d_u = convexified_diagonal(u, state.lam0, state.lam1, eps, gamma)
    theta_z = state.lamz / z
    rhs = -np.concatenate(
        [
            sys.mass @ y - problem.mass_y_d + F_y.T @ p,
            _inv_eps(eps) * (1.0 - 2.0 * u) + F_u.T @ p + q - mu / u + mu / (1.0 - u),
            [q - mu / z],
            F,
            [u.sum() + z - problem.S],
        ]
    )
    return SaddleSystem(
        mass=sys.mass, c_y=F_y.tocsr() if hasattr(F_y, "tocsr") else F_y,
        c_u=F_u, d_u=d_u, theta_z=theta_z, rhs=rhs,
    )


def multiplier_steps(state: IpmState, du: np.ndarray, dz: float, mu: float):
    u, lam0, lam1 = state.u, state.lam0, state.lam1
    dlam0 = -(lam0 / u) * du - lam0 + mu / u
    dlam1 = (lam1 / (1.0 - u)) * du - lam1 + mu / (1.0 - u)
    dlamz = -(state.lamz / state.z) * dz - state.lamz + mu / state.z
    return dlam0, dlam1, dlamz


def _max_step(v, dv):
    """Largest α with ``v + α dv ≥ 0`` (inf if no component decreases)."""
    v = np.atleast_1d(v)
    dv = np.atleast_1d(dv)
    neg = dv < 0
    if not np.any(neg):
        return math.inf
    return float(np.min(-v[neg] / dv[neg]))


def step_lengths(state: IpmState, d: Direction, fraction: float = 0.995) -> tuple[float, float]:
    """Fraction-to-boundary step lengths for primal and dual variables."""
    a_p = min(
        _max_step(state.u, d.du),
        _max_step(1.0 - state.u, -d.du),
        _max_step(state.z, d.dz),
    )
    a_d = min(
        _max_step(state.lam0, d.dlam0),
        _max_step(state.lam1, d.dlam1),
        _max_step(state.lamz, d.dlamz),
    )
    return min(1.0, fraction * a_p), min(1.0, fraction * a_d)


def _take_step(state: IpmState, d: Direction, a_p: float, a_d: float) -> IpmState:
    return replace(
        state,
        y=state.y + a_p * d.dy,
        u=state.u + a_p * d.du,
        z=state.z + a_p * d.dz,
        p=state.p + a_d * d.dp,
        q=state.q + a_d * d.dq,
        lam0=state.lam0 + a_d * d.dlam0,
        lam1=state.lam1 + a_d * d.dlam1,
        lamz=state.lamz + a_d * d.dlamz,
    )


def initial_state(problem: MipdecoProblem, x_init: IterateX, config: IpmConfig) -> IpmState:
    m = config.u_margin
    u = np.clip(np.asarray(x_init.u, dtype=float), m, 1.0 - m)
    z = max(problem.S - u.sum(), config.z_min)
    mu = config.mu0
    y = np.asarray(x_init.y, dtype=float).copy()
    n = problem.n_state
    return IpmState(
        y=y, u=u, z=z, p=np.zeros(n), q=0.0,
        lam0=mu / u, lam1=mu / (1.0 - u), lamz=mu / z, mu=mu,
    )


def _project_to_X(problem: MipdecoProblem, u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    total = u.sum()
    if total > problem.S:
        u = u * (problem.S / total)
    return u


def ipm_solve(
    problem: MipdecoProblem,
    eps: float,
    x_init: IterateX,
    config: IpmConfig | None = None,
) -> tuple[IterateX, IpmTrace]:
    """Approximately minimize the penalized relaxation from ``x_init``.

    ``eps=math.inf`` drops the penalty term, i.e. solves the convex
    continuous relaxation.  The returned iterate pairs the final control
    (projected onto the box/knapsack set) with its exact state.
    """
    config = config or IpmConfig()
    if not eps > 0:
        raise ValueError("penalty parameter must be positive")
    sys = problem.system
    state = initial_state(problem, x_init, config)
    trace = IpmTrace(eps=eps)
    nonlinear = not sys.is_linear

    for _ in range(config.max_iters):
        mu = state.mu
        newton = assemble_newton_system(state, problem, eps, config.gamma)
        c_y_factor = sys.stiffness_factor if sys.is_linear else factorize(newton.c_y, "general")
        precond = saddle_preconditioner(newton, sys.mass_factor, c_y_factor)
        sol = gmres(newton.matvec, newton.rhs, precond, config.gmres_tolerance(mu), config.gmres_max_iters)
        trace.gmres_iterations.append(sol.iterations)
        if not sol.converged:
            trace.linear_solver_failures += 1
            log.debug("GMRES stopped at residual %.2e after %d iterations", sol.residual, sol.iterations)

        dy, du, dz, dp, dq = newton.split(sol.x)
        dlam0, dlam1, dlamz = multiplier_steps(state, du, dz, mu)
        d = Direction(dy, du, float(dz), dp, float(dq), dlam0, dlam1, float(dlamz))
        a_p, a_d = step_lengths(state, d, config.boundary_fraction)

        trial = _take_step(state, d, a_p, a_d)
        if nonlinear:
            merit0 = residuals(state, problem, eps).max_norm
            for _ in range(config.max_backtracks):
                if residuals(trial, problem, eps).max_norm < merit0:
                    break
                a_p, a_d = 0.5 * a_p, 0.5 * a_d
                trial = _take_step(state, d, a_p, a_d)
        state = trial
        assert state.is_interior(), "interior point iterate left the interior"

        res = residuals(state, problem, eps, mu=0.0)
        trace.iterations += 1
        trace.mu_values.append(mu)
        trace.residual_norms.append(res.max_norm)
        if res.max_norm <= config.tol:
            trace.converged = True
            break
        state.mu = mu * config.mu_factor
        if state.mu <= config.mu_min:
            break
    else:
        trace.max_iters_reached = True

    x = lift_control(problem, _project_to_X(problem, state.u))
    return x, trace

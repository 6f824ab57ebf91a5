"""Problem data, objectives and the smart rounding onto the integer set."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from mipdeco.fem import FemSystem, solve_state, state_residual

PDE_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class MipdecoProblem:
    """Fit ``y_d`` by switching on at most ``S`` of the ``l`` sources."""

    system: FemSystem
    y_d: np.ndarray
    S: int

    def __post_init__(self):
        y_d = np.asarray(self.y_d, dtype=float)
        if y_d.shape != (self.system.n_state,):
            raise ValueError(f"y_d has shape {y_d.shape}, expected ({self.system.n_state},)")
        if not np.all(np.isfinite(y_d)):
            raise ValueError("y_d must be finite")
        if not 1 <= self.S <= self.system.n_controls:
            raise ValueError(f"knapsack bound S={self.S} outside [1, {self.system.n_controls}]")
        object.__setattr__(self, "y_d", y_d)

    @property
    def n_controls(self) -> int:
        return self.system.n_controls

    @property
    def n_state(self) -> int:
        return self.system.n_state

    @cached_property
    def mass_y_d(self) -> np.ndarray:
        return self.system.mass @ self.y_d

    @cached_property
    def target_energy(self) -> float:
        return 0.5 * float(self.y_d @ self.mass_y_d)


@dataclass(frozen=True, eq=False)
class IterateX:
    """Stacked state/control pair ``x = (y, u)``."""

    y: np.ndarray
    u: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.y, self.u])

    def in_X(self, problem: MipdecoProblem, tol: float = 1e-12) -> bool:
        u = self.u
        if np.any(u < -tol) or np.any(u > 1 + tol) or u.sum() > problem.S + tol:
            return False
        sys = problem.system
        rhs_norm = np.linalg.norm(sys.mass_phi @ u)
        res = np.linalg.norm(state_residual(sys, self.y, u))
        return res <= PDE_RTOL * max(1.0, rhs_norm)

    def in_W(self, problem: MipdecoProblem) -> bool:
        return bool(np.all((self.u == 0.0) | (self.u == 1.0))) and self.in_X(problem, tol=0.0)


def objective_raw(problem: MipdecoProblem, x: IterateX) -> float:
    """``½ (y - y_d)ᵀ M (y - y_d)``."""
    d = x.y - problem.y_d
    return 0.5 * float(d @ (problem.system.mass @ d))


def penalty_term(u: np.ndarray, eps: float) -> float:
    if np.isinf(eps):
        return 0.0
    return float(np.sum(u * (1.0 - u))) / eps


def objective_penalized(problem: MipdecoProblem, eps: float, x: IterateX) -> float:
    if not eps > 0:
        raise ValueError("penalty parameter must be positive")
    return objective_raw(problem, x) + penalty_term(x.u, eps)


def smart_round(u: np.ndarray, S: int) -> np.ndarray:
    """Round the ``S`` largest entries to the nearest integer, zero the rest.

    Ties among equal entries go to the lowest index; 0.5 rounds up.
    """
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    if S <= 0 or u.size == 0:
        return out
    order = np.lexsort((np.arange(u.size), -u))
    top = order[: min(S, u.size)]
    out[top] = (u[top] >= 0.5).astype(float)
    return out


def feasibility_gap(u: np.ndarray, S: int) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.max(np.abs(u - smart_round(u, S)), initial=0.0))


def lift_control(problem: MipdecoProblem, u: np.ndarray) -> IterateX:
    u = np.asarray(u, dtype=float).copy()
    return IterateX(solve_state(problem.system, u), u)


def round_iterate(problem: MipdecoProblem, x: IterateX) -> IterateX:
    """``[x]_SR``: smart-rounded control paired with its exact state."""
    return lift_control(problem, smart_round(x.u, problem.S))


@dataclass(frozen=True)
class ChebyshevBoxes:
    """Boxes ``B(z) = {|y|_∞ ≤ β, |u - z_u|_∞ ≤ ρ}`` around points of W."""

    beta: float
    rho: float = 0.4

    def __post_init__(self):
        if not 0 < self.rho < 0.5:
            raise ValueError("rho must lie in (0, 0.5) for the boxes to be disjoint")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @classmethod
    def for_problem(cls, problem: MipdecoProblem, rho: float = 0.4) -> "ChebyshevBoxes":
        # superposition bound: S times the largest single-source state
        sys = problem.system
        cols = sys.stiffness_factor.solve(sys.mass_phi)
        cols = np.atleast_2d(cols.T).T
        beta = problem.S * float(np.max(np.abs(cols))) if cols.size else 1.0
        return cls(beta=max(beta, np.finfo(float).tiny), rho=rho)


def _interval_distance(v, lo, hi):
    return np.maximum(np.maximum(lo - v, v - hi), 0.0)


def chebyshev_box_distance(x: IterateX, z_u: np.ndarray, boxes: ChebyshevBoxes) -> float:
    """``min_{p ∈ B(z)} |x - p|_∞`` by clamping each coordinate to the box."""
    z_u = np.asarray(z_u, dtype=float)
    dy = _interval_distance(np.asarray(x.y), -boxes.beta, boxes.beta)
    du = _interval_distance(np.asarray(x.u), z_u - boxes.rho, z_u + boxes.rho)
    return float(max(np.max(dy, initial=0.0), np.max(du, initial=0.0)))

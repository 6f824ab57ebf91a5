"""Outer penalty loops: simple penalty, exact penalty (EXP) and the
improved penalty algorithm (IPA) with basin-hopping perturbations."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from mipdeco.fem import FemSystem, solve_state
from mipdeco.ipm import IpmConfig, IpmTrace, ipm_solve
from mipdeco.model import (
    IterateX,
    MipdecoProblem,
    feasibility_gap,
    lift_control,
    objective_penalized,
    objective_raw,
    round_iterate,
    smart_round,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OuterConfig:
    eps0: float = 1e5
    sigma_ipa: float = 0.7
    sigma_penalty: float = 0.9
    eps_feas: float = 0.1
    p_max: int = 300
    theta: int = 3
    adjacency_factor: float = math.sqrt(2.0)
    seed: int = 0
    d_loc_accept: float = 0.2
    eps_min: float = 1e-12
    max_penalty_reductions: int = 1000
    ipm: IpmConfig = field(default_factory=IpmConfig)

    def __post_init__(self):
        if not (0 < self.sigma_ipa < 1 and 0 < self.sigma_penalty < 1):
            raise ValueError("sigma must lie in (0, 1)")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if self.p_max < 1 or self.theta < 1:
            raise ValueError("p_max and theta must be at least 1")


@dataclass(frozen=True)
class ExpConfig:
    delta0: float = 1.0
    sigma: float = 0.7
    delta_min: float = 1e-3
    max_iters: int = 5000

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")


@dataclass
class IpmRecord:
    eps: float
    nli: int
    gmres: list
    converged: bool

    @property
    def average_gmres(self) -> float:
        return float(np.mean(self.gmres)) if self.gmres else 0.0

    @classmethod
    def from_trace(cls, trace: IpmTrace) -> "IpmRecord":
        return cls(trace.eps, trace.iterations, list(trace.gmres_iterations), trace.converged)


@dataclass
class SolveReport:
    algorithm: str
    u: np.ndarray
    y: np.ndarray
    objective: float
    eps_trajectory: list = field(default_factory=list)
    reduced_eps: list = field(default_factory=list)
    phase_boundary: int | None = None
    perturbation_cycles: list = field(default_factory=list)
    ipm_calls: list = field(default_factory=list)
    wall_time: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(f.startswith("fail") for f in self.flags)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["u"] = [int(v) for v in self.u]
        d["y"] = None
        d["ipm_calls"] = [asdict(r) for r in self.ipm_calls]
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def trace_rows(self) -> list[tuple[float, float, int]]:
        return [(r.eps, r.average_gmres, r.nli) for r in self.ipm_calls]


class _Recorder:
    def __init__(self, problem, config):
        self.problem = problem
        self.config = config
        self.calls: list[IpmRecord] = []

    def local_solve(self, eps, x_init):
        x, trace = ipm_solve(self.problem, eps, x_init, self.config.ipm)
        if math.isfinite(eps):
            self.calls.append(IpmRecord.from_trace(trace))
        return x


def relaxation_start(problem: MipdecoProblem, config: OuterConfig | None = None) -> IterateX:
    """Solution of the continuous relaxation, the default initial guess."""
    config = config or OuterConfig()
    u0 = np.full(problem.n_controls, min(0.5, 0.5 * problem.S / problem.n_controls))
    x, _ = ipm_solve(problem, math.inf, lift_control(problem, u0), config.ipm)
    return x


def _final_report(problem, name, x, t0, **kw) -> SolveReport:
    xr = round_iterate(problem, x)
    return SolveReport(
        algorithm=name, u=xr.u, y=xr.y, objective=objective_raw(problem, xr),
        wall_time=time.perf_counter() - t0, **kw,
    )


# ---------------------------------------------------------------------------
# simple penalty
# ---------------------------------------------------------------------------

def simple_penalty(problem: MipdecoProblem, x0: IterateX | None = None, config: OuterConfig | None = None) -> SolveReport:
    """Shrink ε geometrically after every local solve until near-integer."""
    config = config or OuterConfig()
    t0 = time.perf_counter()
    x = x0 if x0 is not None else relaxation_start(problem, config)
    rec = _Recorder(problem, config)
    eps = config.eps0
    traj = []
    flags = []
    for _ in range(config.max_penalty_reductions):
        x = rec.local_solve(eps, x)
        traj.append(eps)
        eps *= config.sigma_penalty
        if feasibility_gap(x.u, problem.S) < config.eps_feas:
            break
    else:
        flags.append("fail:max-reductions")
    return _final_report(
        problem, "penalty", x, t0, eps_trajectory=traj, reduced_eps=[True] * len(traj),
        phase_boundary=len(traj), ipm_calls=rec.calls, flags=flags,
    )


# ---------------------------------------------------------------------------
# perturbation
# ---------------------------------------------------------------------------

def adjacency(system: FemSystem, factor: float = math.sqrt(2.0)) -> list[np.ndarray]:
    """Neighbors of each control within ``factor × spacing`` of its center."""
    pts = system.control_points
    spacing = system.control_spacing
    if not math.isfinite(spacing):
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        spacing = float(d.min()) if d.size > 1 else 1.0
    r = factor * spacing * (1.0 + 1e-9)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    return [np.flatnonzero((d[i] <= r) & (np.arange(len(pts)) != i)) for i in range(len(pts))]


def perturb_control(u: np.ndarray, theta: int, rng: np.random.Generator, neighbors) -> np.ndarray:
    """Up to ``theta`` flips moving mass from a large entry to a neighbor."""
    u = np.asarray(u, dtype=float)
    u_pert = u.copy()
    large = list(np.flatnonzero(u > 0.5))
    for _ in range(min(len(large), theta)):
        i = large.pop(int(rng.integers(len(large))))
        adj = neighbors[i]
        u_pert[i] = rng.uniform(0.1, 0.2)
        if len(adj) == 0:
            continue
        j = int(adj[rng.integers(len(adj))])
        d = abs(u[i] - u_pert[i])
        u_pert[j] = rng.uniform(d - 0.1, d)
    return u_pert


def perturb(problem: MipdecoProblem, x: IterateX, theta: int, rng: np.random.Generator, neighbors=None) -> IterateX:
    if neighbors is None:
        neighbors = adjacency(problem.system)
    u_pert = perturb_control(x.u, theta, rng, neighbors)
    return IterateX(solve_state(problem.system, u_pert), u_pert)


# ---------------------------------------------------------------------------
# IPA
# ---------------------------------------------------------------------------

def accept_local(problem, x, x_loc, eps, eps_decreased: bool, d_loc_accept: float = 0.2) -> bool:
    """Replacement rule for ``J(x_loc) < J(x)`` inside the perturbation loop."""
    S = problem.S
    j_loc = objective_penalized(problem, eps, x_loc)
    j_x = objective_penalized(problem, eps, x)
    d_loc = float(np.max(np.abs(x_loc.u - x.u)))
    sr_loc, sr_x = smart_round(x_loc.u, S), smart_round(x.u, S)
    d_sr = float(np.max(np.abs(sr_loc - sr_x)))
    if eps_decreased:
        return j_loc < j_x or d_loc < d_loc_accept or d_sr == 0.0
    if d_sr == 0.0 or not j_loc < j_x:
        return False
    return objective_raw(problem, lift_control(problem, sr_loc)) < objective_raw(problem, lift_control(problem, sr_x))


def reduction_via_perturbation(
    problem: MipdecoProblem,
    x: IterateX,
    eps: float,
    config: OuterConfig,
    rng: np.random.Generator,
    eps_decreased: bool = True,
    local_solve: Callable | None = None,
    neighbors=None,
) -> tuple[IterateX, int]:
    """Local solves from perturbed starts until one is accepted.

    Returns the accepted iterate and the number of local solves; after
    ``p_max`` rejections the input ``x`` itself is returned.
    """
    if local_solve is None:
        def local_solve(e, xi):
            return ipm_solve(problem, e, xi, config.ipm)[0]
    if neighbors is None:
        neighbors = adjacency(problem.system, config.adjacency_factor)
    x_init = x
    for j in range(1, config.p_max + 1):
        x_loc = local_solve(eps, x_init)
        if accept_local(problem, x, x_loc, eps, eps_decreased, config.d_loc_accept):
            return x_loc, j
        x_init = perturb(problem, x_loc, config.theta, rng, neighbors)
    return x, config.p_max


def _reduce_eps(problem, x, eps, eps_feas) -> bool:
    """Step-2 test: not integer-feasible and rounding does not pay off."""
    if feasibility_gap(x.u, problem.S) <= eps_feas:
        return False
    xr = round_iterate(problem, x)
    lhs = objective_penalized(problem, eps, x) - objective_penalized(problem, eps, xr)
    return lhs <= eps * float(np.linalg.norm(x.stacked() - xr.stacked()))


def ipa(
    problem: MipdecoProblem,
    x0: IterateX | None = None,
    config: OuterConfig | None = None,
    rng: np.random.Generator | None = None,
) -> SolveReport:
    """Improved penalty algorithm.

    Phase one shrinks ε while the local solutions stay fractional; phase two
    keeps ε and hops between basins until ``p_max`` perturbations in a row
    fail to improve the rounded objective.
    """
    config = config or OuterConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    x = x0 if x0 is not None else relaxation_start(problem, config)
    rec = _Recorder(problem, config)
    neighbors = adjacency(problem.system, config.adjacency_factor)
    eps, eps_prev = config.eps0, math.inf
    traj, reduced, cycles, flags = [], [], [], []
    boundary = None
    while True:
        x_new, n_cycles = reduction_via_perturbation(
            problem, x, eps, config, rng, eps_decreased=eps < eps_prev,
            local_solve=rec.local_solve, neighbors=neighbors,
        )
        traj.append(eps)
        cycles.append(n_cycles)
        shrink = _reduce_eps(problem, x_new, eps, config.eps_feas)
        reduced.append(shrink)
        if not shrink and boundary is None:
            boundary = len(traj) - 1
        eps_prev = eps
        if shrink:
            eps *= config.sigma_ipa
        if x_new is x:
            break
        x = x_new
        if eps < config.eps_min:
            flags.append("eps-floor")
            break
    if boundary is None:
        boundary = len(traj)
    log.debug("IPA stopped after %d outer steps, final eps %.3e", len(traj), eps)
    return _final_report(
        problem, "ipa", x, t0, eps_trajectory=traj, reduced_eps=reduced,
        phase_boundary=boundary, perturbation_cycles=cycles, ipm_calls=rec.calls, flags=flags,
    )


# ---------------------------------------------------------------------------
# EXP
# ---------------------------------------------------------------------------

def oracle_subsolver(problem: MipdecoProblem) -> Callable:
    """Exact global minimizer of the penalized relaxation (small l only)."""
    from mipdeco.oracle import penalized_global_min, reduced_quadratic

    reduced = reduced_quadratic(problem)
    cache = {}

    def solve(eps, delta, x_prev):
        if eps not in cache:
            cache[eps] = lift_control(problem, penalized_global_min(problem, eps, reduced))
        return cache[eps]

    return solve


def perturbation_subsolver(problem: MipdecoProblem, config: OuterConfig, rng=None) -> Callable:
    """Approximate δ-global step via :func:`reduction_via_perturbation`."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    state = {"eps": math.inf}

    def solve(eps, delta, x_prev):
        decreased = eps < state["eps"]
        state["eps"] = eps
        x, _ = reduction_via_perturbation(problem, x_prev, eps, config, rng, eps_decreased=decreased)
        return x

    return solve


def exp_algorithm(
    problem: MipdecoProblem,
    config: OuterConfig | None = None,
    exp_config: ExpConfig | None = None,
    subsolver: Callable | None = None,
    x0: IterateX | None = None,
) -> SolveReport:
    """Exact penalty loop deciding between more penalization and more accuracy."""
    config = config or OuterConfig()
    exp_config = exp_config or ExpConfig()
    t0 = time.perf_counter()
    if subsolver is None:
        subsolver = perturbation_subsolver(problem, config)
    x = x0 if x0 is not None else relaxation_start(problem, config)
    eps, delta = config.eps0, exp_config.delta0
    best, best_val = None, math.inf
    traj, reduced, flags = [], [], []
    boundary = None
    for _ in range(exp_config.max_iters):
        x = subsolver(eps, delta, x)
        xr = round_iterate(problem, x)
        val = objective_raw(problem, xr)
        if val < best_val:
            best, best_val = xr, val
        traj.append(eps)
        in_W = feasibility_gap(x.u, problem.S) == 0.0
        gap = objective_penalized(problem, eps, x) - objective_penalized(problem, eps, xr)
        shrink = (not in_W) and gap <= eps * float(np.linalg.norm(x.stacked() - xr.stacked()))
        reduced.append(shrink)
        if shrink:
            eps *= exp_config.sigma
        else:
            if boundary is None:
                boundary = len(traj) - 1
            delta *= exp_config.sigma
        if delta <= exp_config.delta_min:
            break
    else:
        flags.append("max-iters")
    report = _final_report(
        problem, "exp", best, t0, eps_trajectory=traj, reduced_eps=reduced,
        phase_boundary=boundary if boundary is not None else len(traj), flags=flags,
    )
    return report

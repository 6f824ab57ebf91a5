"""Brute-force global solvers for small control dimensions."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from mipdeco.fem import solve_state
from mipdeco.model import IterateX, MipdecoProblem, objective_raw

DEFAULT_BUDGET = 200_000


class BudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class EnumerationBudget:
    max_candidates: int = DEFAULT_BUDGET

    def check(self, l: int, S: int) -> int:
        count = candidate_count(l, S)
        if count > self.max_candidates:
            raise BudgetExceeded(f"{count} candidates for l={l}, S={S} exceed budget {self.max_candidates}")
        return count


def candidate_count(l: int, S: int) -> int:
    return sum(math.comb(l, k) for k in range(min(S, l) + 1))


def binary_controls(l: int, S: int):
    """All binary controls with at most ``S`` ones, in lexicographic order."""
    controls = []
    for k in range(min(S, l) + 1):
        for on in itertools.combinations(range(l), k):
            u = np.zeros(l)
            u[list(on)] = 1.0
            controls.append(u)
    controls.sort(key=tuple)
    return controls


@dataclass
class OracleResult:
    u: np.ndarray
    objective: float
    n_candidates: int
    table: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["control", "objective"])
            for u, val in self.table:
                w.writerow(["".join(str(int(v)) for v in u), repr(val)])


def enumerate_global_min(
    problem: MipdecoProblem,
    budget: EnumerationBudget | None = None,
    keep_table: bool = False,
) -> OracleResult:
    """Exact minimizer of the integer problem by evaluating every candidate.

    Each candidate costs one forward solve with the cached factorization
    (Newton for the nonlinear state equation).  Ties keep the
    lexicographically smallest control.
    """
    budget = budget or EnumerationBudget()
    l, S = problem.n_controls, problem.S
    count = budget.check(l, S)
    best_u, best_val = None, math.inf
    table = []
    for u in binary_controls(l, S):
        val = objective_raw(problem, IterateX(solve_state(problem.system, u), u))
        if keep_table:
            table.append((u, val))
        if val < best_val:
            best_u, best_val = u, val
    return OracleResult(best_u, best_val, count, table)


def reduced_quadratic(problem: MipdecoProblem):
    """``G, c, const`` with ``J̃(f(u), u) = ½ uᵀGu - cᵀu + const`` (linear PDEs)."""
    sys = problem.system
    if not sys.is_linear:
        raise ValueError("reduced quadratic needs a linear state equation")
    Y = sys.stiffness_factor.solve(sys.mass_phi)
    MY = sys.mass @ Y
    G = Y.T @ MY
    c = MY.T @ problem.y_d
    return 0.5 * (G + G.T), c, problem.target_energy


def penalized_global_min(problem: MipdecoProblem, eps: float, reduced=None) -> np.ndarray:
    """Global minimizer of the penalized relaxation over X, by face enumeration.

    The objective is a (possibly indefinite) quadratic in ``u`` over the
    polytope ``{0 ≤ u ≤ 1, 1ᵀu ≤ S}``.  Every global minimizer is a
    stationary point in the relative interior of some face, so solving the
    stationarity system on each face and keeping the best feasible point is
    exact.  Cost grows like ``3^l``; intended for ``l ≤ 9``.
    """
    G, c, _ = reduced if reduced is not None else reduced_quadratic(problem)
    l, S = problem.n_controls, problem.S
    inv_eps = 0.0 if math.isinf(eps) else 1.0 / eps
    H = G - 2.0 * inv_eps * np.eye(l)
    g = -c + inv_eps * np.ones(l)

    def value(u):
        return 0.5 * u @ H @ u + g @ u

    best_u, best_val = np.zeros(l), 0.0
    tol = 1e-10
    for n_ones in range(min(S, l) + 1):
        for ones in itertools.combinations(range(l), n_ones):
            rest = [i for i in range(l) if i not in ones]
            for n_free in range(len(rest) + 1):
                for free in itertools.combinations(rest, n_free):
                    u_fix = np.zeros(l)
                    u_fix[list(ones)] = 1.0
                    F = list(free)
                    if not F:
                        cand = [u_fix]
                    else:
                        HFF = H[np.ix_(F, F)]
                        rhs = -(g[F] + H[F] @ u_fix)
                        cand = []
                        uf = np.linalg.lstsq(HFF, rhs, rcond=None)[0]
                        cand.append(uf)
                        budget = S - n_ones
                        if budget >= 0:
                            # knapsack active on this face
                            kkt = np.zeros((len(F) + 1, len(F) + 1))
                            kkt[:-1, :-1] = HFF
                            kkt[:-1, -1] = 1.0
                            kkt[-1, :-1] = 1.0
                            sol = np.linalg.lstsq(kkt, np.append(rhs, budget), rcond=None)[0]
                            cand.append(sol[:-1])
                        full = []
                        for uf in cand:
                            u = u_fix.copy()
                            u[F] = uf
                            full.append(u)
                        cand = full
                    for u in cand:
                        if np.all(u >= -tol) and np.all(u <= 1 + tol) and u.sum() <= S + tol:
                            u = np.clip(u, 0.0, 1.0)
                            val = value(u)
                            if val < best_val - 1e-15:
                                best_u, best_val = u, val
    return best_u

"""Sparse factorizations, right-preconditioned GMRES and the saddle-point
preconditioner used by the interior point solver."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class FactorizationError(RuntimeError):
    pass


class Factorization:
    """Sparse LU factors with ``solve`` and transposed ``solve``.

    For ``kind="spd"`` the LU is computed with symmetric ordering and no
    pivoting, i.e. it is an LDLᵀ factorization in disguise; positive pivots
    certify positive definiteness.
    """

    def __init__(self, matrix, kind: str = "general"):
        A = sp.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise FactorizationError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        self.kind = kind
        if kind == "spd":
            asym = abs(A - A.T).max() if A.nnz else 0.0
            if asym > 1e-12 * max(abs(A).max(), 1e-300):
                raise FactorizationError("matrix is not symmetric")
            try:
                self._lu = spla.splu(
                    A,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise FactorizationError(f"factorization broke down: {exc}") from exc
            pivots = self._lu.U.diagonal()
            if np.any(self._lu.perm_r != self._lu.perm_c) or np.any(pivots <= 0):
                raise FactorizationError("matrix is not positive definite")
        elif kind == "general":
            try:
                self._lu = spla.splu(A)
            except RuntimeError as exc:
                raise FactorizationError(f"factorization broke down: {exc}") from exc
        else:
            raise ValueError(f"unknown factorization kind {kind!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_transpose(self, b: np.ndarray) -> np.ndarray:
        if self.kind == "spd":
            return self.solve(b)
        return self._lu.solve(np.asarray(b, dtype=float), trans="T")


def factorize(matrix, kind: str = "general") -> Factorization:
    return Factorization(matrix, kind)


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)
    breakdown: bool = False


def gmres(
    matvec: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
    rtol: float = 1e-6,
    max_iters: int = 400,
) -> GmresResult:
    """Full GMRES with right preconditioning, started from zero.

    Stops at the first iterate whose unpreconditioned relative residual
    ``|b - A x| / |b|`` is at most ``rtol``.  ``history`` holds the relative
    residual after each iteration (entry 0 is the initial residual, 1.0).
    """
    if not 0.0 < rtol < 1.0:
        raise ValueError("rtol must lie in (0, 1)")
    b = np.asarray(rhs, dtype=float)
    n = b.size
    beta = float(np.linalg.norm(b))
    if beta == 0.0:
        return GmresResult(np.zeros(n), 0, 0.0, True, [0.0])
    if precond is None:
        def precond(v):
            return v

    m = min(max_iters, n)
    V = np.zeros((m + 1, n))
    Z = np.zeros((m, n))
    H = np.zeros((m + 1, m))
    cs = np.zeros(m)
    sn = np.zeros(m)
    g = np.zeros(m + 1)
    g[0] = beta
    V[0] = b / beta
    history = [1.0]
    k = 0
    breakdown = False
    while k < m:
        Z[k] = precond(V[k])
        w = np.array(matvec(Z[k]), dtype=float)  # copy: matvec may alias its input
        # modified Gram-Schmidt, twice for stability
        for _ in range(2):
            for i in range(k + 1):
                hik = V[i] @ w
                H[i, k] += hik
                w -= hik * V[i]
        hnext = float(np.linalg.norm(w))
        H[k + 1, k] = hnext
        for i in range(k):
            t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
            H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
            H[i, k] = t
        denom = np.hypot(H[k, k], H[k + 1, k])
        if denom == 0.0:
            breakdown = True
            break
        cs[k] = H[k, k] / denom
        sn[k] = H[k + 1, k] / denom
        H[k, k] = denom
        H[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        k += 1
        history.append(abs(g[k]) / beta)
        if history[-1] <= rtol:
            break
        if hnext <= 1e-14 * denom:
            # happy breakdown: the Krylov space is invariant
            break
        V[k] = w / hnext

    if k == 0:
        return GmresResult(np.zeros(n), 0, 1.0, False, history, breakdown=True)
    y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
    x = Z[:k].T @ y
    true_res = float(np.linalg.norm(b - matvec(x))) / beta
    return GmresResult(x, k, true_res, history[-1] <= rtol, history, breakdown)


class BlockTriangularPreconditioner:
    """``P = [[Â, 0], [B, -Ŝ]]`` applied through block solves.

    The blocks are passed as callables so the same class serves the Newton
    systems and small synthetic checks.  ``apply`` returns ``P⁻¹ v``;
    ``forward`` returns ``P v`` and needs the optional multiplications.
    """

    def __init__(self, n1: int, a_solve, b_matvec, s_solve, a_matvec=None, s_matvec=None):
        self.n1 = n1
        self.a_solve = a_solve
        self.b_matvec = b_matvec
        self.s_solve = s_solve
        self.a_matvec = a_matvec
        self.s_matvec = s_matvec

    def apply(self, v: np.ndarray) -> np.ndarray:
        v1, v2 = v[: self.n1], v[self.n1 :]
        w1 = self.a_solve(v1)
        w2 = self.s_solve(self.b_matvec(w1) - v2)
        return np.concatenate([w1, w2])

    __call__ = apply

    def forward(self, w: np.ndarray) -> np.ndarray:
        if self.a_matvec is None or self.s_matvec is None:
            raise ValueError("forward application needs a_matvec and s_matvec")
        w1, w2 = w[: self.n1], w[self.n1 :]
        return np.concatenate([self.a_matvec(w1), self.b_matvec(w1) - self.s_matvec(w2)])


def apply_block_preconditioner(P: BlockTriangularPreconditioner, v: np.ndarray) -> np.ndarray:
    return P.apply(v)


@dataclass
class SaddleSystem:
    """Newton matrix ``[[A, Bᵀ], [B, 0]]`` of the penalized barrier problem.

    ``A = blockdiag(M, diag(d_u), θ_z)`` and
    ``B = [[C_y, C_u, 0], [0, 1ᵀ, 1]]`` where ``C_y`` is the state Jacobian
    (the stiffness matrix for linear equations) and ``C_u = -MΦ``.
    Unknown ordering is ``(Δy, Δu, Δz, Δp, Δq)``.
    """

    mass: sp.csr_matrix
    c_y: sp.csr_matrix
    c_u: np.ndarray
    d_u: np.ndarray
    theta_z: float
    rhs: np.ndarray

    @property
    def n_state(self) -> int:
        return self.mass.shape[0]

    @property
    def n_controls(self) -> int:
        return self.d_u.size

    @property
    def n_primal(self) -> int:
        return self.n_state + self.n_controls + 1

    @property
    def size(self) -> int:
        return self.n_primal + self.n_state + 1

    def split(self, v):
        n, l = self.n_state, self.n_controls
        return v[:n], v[n : n + l], v[n + l], v[n + l + 1 : 2 * n + l + 1], v[-1]

    def a_matvec(self, w1):
        n, l = self.n_state, self.n_controls
        return np.concatenate([self.mass @ w1[:n], self.d_u * w1[n : n + l], [self.theta_z * w1[-1]]])

    def b_matvec(self, w1):
        n, l = self.n_state, self.n_controls
        dy, du, dz = w1[:n], w1[n : n + l], w1[-1]
        return np.concatenate([self.c_y @ dy + self.c_u @ du, [du.sum() + dz]])

    def bt_matvec(self, w2):
        n = self.n_state
        dp, dq = w2[:n], w2[-1]
        return np.concatenate([self.c_y.T @ dp, self.c_u.T @ dp + dq, [dq]])

    def matvec(self, v):
        w1, w2 = v[: self.n_primal], v[self.n_primal :]
        return np.concatenate([self.a_matvec(w1) + self.bt_matvec(w2), self.b_matvec(w1)])

    def to_sparse(self) -> sp.csr_matrix:
        l = self.n_controls
        ones = np.ones((1, l))
        A = sp.block_diag([self.mass, sp.diags(self.d_u), sp.csr_matrix([[self.theta_z]])])
        B = sp.bmat(
            [
                [self.c_y, sp.csr_matrix(self.c_u), None],
                [None, sp.csr_matrix(ones), sp.csr_matrix([[1.0]])],
            ]
        )
        return sp.bmat([[A, B.T], [B, None]]).tocsr()


def saddle_preconditioner(
    system: SaddleSystem, mass_factor: Factorization, c_y_factor: Factorization
) -> BlockTriangularPreconditioner:
    """Preconditioner with ``Â = A`` and ``Ŝ = blockdiag(C_y M⁻¹ C_yᵀ, 1)``."""
    n, l = system.n_state, system.n_controls

    def a_solve(v1):
        return np.concatenate(
            [mass_factor.solve(v1[:n]), v1[n : n + l] / system.d_u, [v1[-1] / system.theta_z]]
        )

    def s_solve(v2):
        # (C M⁻¹ Cᵀ)⁻¹ r = C⁻ᵀ M C⁻¹ r
        t = c_y_factor.solve(v2[:n])
        t = c_y_factor.solve_transpose(system.mass @ t)
        return np.concatenate([t, [v2[-1]]])

    def s_matvec(w2):
        t = system.c_y.T @ w2[:n]
        t = system.c_y @ mass_factor.solve(t)
        return np.concatenate([t, [w2[-1]]])

    return BlockTriangularPreconditioner(
        system.n_primal, a_solve, system.b_matvec, s_solve, system.a_matvec, s_matvec
    )

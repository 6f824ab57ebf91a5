"""Structured finite element discretizations on the unit square.

Three state equations are supported, all with homogeneous Dirichlet data:

* ``poisson``: ``-Δy = Σ u_i φ_i`` with P1 triangles and Gaussian sources,
* ``convection-diffusion``: ``-Δy + w·∇y = Σ u_i χ_i`` with SUPG-stabilized Q1
  elements and piecewise-constant patch sources,
* ``nonlinear-poisson``: ``-Δy + y² = Σ u_i φ_i`` with P1 triangles.

Boundary vertices are eliminated, so every vector and matrix in a
:class:`FemSystem` lives on the interior degrees of freedom only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from mipdeco.linalg import Factorization, factorize

POISSON = "poisson"
CONVECTION_DIFFUSION = "convection-diffusion"
NONLINEAR_POISSON = "nonlinear-poisson"
KINDS = (POISSON, CONVECTION_DIFFUSION, NONLINEAR_POISSON)


class FemError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh2D:
    """Uniform mesh of [0, 1]² with ``1/h`` cells per side.

    Every square cell is stored both as a quadrilateral (Q1) and as two
    triangles split along the south-west/north-east diagonal (P1).
    """

    h: float
    coords: np.ndarray
    triangles: np.ndarray
    quads: np.ndarray
    boundary: np.ndarray
    interior: np.ndarray

    @property
    def n_cells(self) -> int:
        return int(round(1.0 / self.h))

    @property
    def n_vertices(self) -> int:
        return self.coords.shape[0]

    @property
    def n_interior(self) -> int:
        return self.interior.size

    def interior_coords(self) -> np.ndarray:
        return self.coords[self.interior]


def dyadic_level(h: float) -> int:
    """Return ``k`` with ``h == 2**-k``; raise ValueError otherwise."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    k = -math.log2(h)
    k_int = int(round(k))
    if abs(k - k_int) > 1e-12:
        raise ValueError(f"step size {h} is not of the form 2^-k")
    return k_int


def build_mesh(h: float) -> Mesh2D:
    k = dyadic_level(h)
    if k < 2:
        raise ValueError(f"step size 2^-{k} is too coarse, need k >= 2")
    n = 2**k
    ticks = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(ticks, ticks, indexing="xy")
    coords = np.column_stack([xx.ravel(), yy.ravel()])

    # vertex (i, j) -> i + j*(n+1); cell (i, j) has lower-left vertex (i, j)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    sw = (i + j * (n + 1)).ravel()
    se = sw + 1
    nw = sw + (n + 1)
    ne = nw + 1
    quads = np.column_stack([sw, se, ne, nw])
    triangles = np.vstack([np.column_stack([sw, se, ne]), np.column_stack([sw, ne, nw])])

    vi, vj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    on_edge = ((vi == 0) | (vi == n) | (vj == 0) | (vj == n)).ravel()
    return Mesh2D(
        h=2.0**-k,
        coords=coords,
        triangles=triangles,
        quads=quads,
        boundary=np.flatnonzero(on_edge),
        interior=np.flatnonzero(~on_edge),
    )


def gaussian_width_from_neighbor_fraction(spacing: float, fraction: float) -> float:
    """Width ω such that a Gaussian drops to ``fraction`` of its peak at ``spacing``."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    return spacing**2 / math.log(1.0 / fraction)


@dataclass(frozen=True)
class GaussianSources:
    """Gaussians ``κ exp(-|x - c|² / ω)`` at arbitrary centers."""

    centers: np.ndarray
    kappa: float
    omega: float

    def __post_init__(self):
        if not (self.kappa > 0 and self.omega > 0):
            raise ValueError("kappa and omega must be positive")

    @property
    def count(self) -> int:
        return len(self.centers)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Return the (n_points, n_sources) matrix of source values."""
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        return self.kappa * np.exp(-d2 / self.omega)


@dataclass(frozen=True)
class GaussianSourceGrid:
    """An ``m × m`` grid of Gaussian sources over ``[lower, upper]²``.

    Centers are ordered lexicographically with the first coordinate running
    fastest, so source ``i`` has grid position ``(i % m, i // m)``.
    """

    m: int
    lower: float = 0.1
    upper: float = 0.9
    kappa: float = 100.0
    omega: float | None = None
    neighbor_fraction: float = 0.05

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("source grid needs m >= 2")
        if not 0.0 < self.lower < self.upper < 1.0:
            raise ValueError("source subdomain must lie strictly inside (0, 1)")
        if self.omega is None:
            w = gaussian_width_from_neighbor_fraction(self.spacing, self.neighbor_fraction)
            object.__setattr__(self, "omega", w)
        if not (self.kappa > 0 and self.omega > 0):
            raise ValueError("kappa and omega must be positive")

    @property
    def count(self) -> int:
        return self.m * self.m

    @property
    def spacing(self) -> float:
        return (self.upper - self.lower) / (self.m - 1)

    @property
    def centers(self) -> np.ndarray:
        ticks = np.linspace(self.lower, self.upper, self.m)
        cx, cy = np.meshgrid(ticks, ticks, indexing="xy")
        return np.column_stack([cx.ravel(), cy.ravel()])

    def as_sources(self) -> GaussianSources:
        return GaussianSources(self.centers, self.kappa, self.omega)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        return self.as_sources().evaluate(points)


@dataclass(frozen=True)
class PatchGrid:
    """Uniform decomposition of [0, 1]² into ``m × m`` square patches."""

    m: int

    @property
    def count(self) -> int:
        return self.m * self.m

    @property
    def spacing(self) -> float:
        return 1.0 / self.m

    @property
    def centers(self) -> np.ndarray:
        ticks = (np.arange(self.m) + 0.5) / self.m
        cx, cy = np.meshgrid(ticks, ticks, indexing="xy")
        return np.column_stack([cx.ravel(), cy.ravel()])


@dataclass(frozen=True, eq=False)
class FemSystem:
    """Interior-restricted matrices of one discretized state equation.

    ``mass`` and ``stiffness`` are ``n × n`` with ``n`` the interior vertex
    count; ``phi`` is ``n × l`` and holds the nodal coefficients of the
    sources, so the discrete right-hand side is ``mass @ phi @ u``.
    ``control_points`` are the spatial counterparts of the controls (source
    centers or patch centers) and ``control_spacing`` their grid spacing.
    """

    mesh: Mesh2D
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    phi: np.ndarray
    kind: str
    control_points: np.ndarray
    control_spacing: float
    grid_dim: int
    sources: object = field(default=None, repr=False)

    @property
    def n_state(self) -> int:
        return self.mass.shape[0]

    @property
    def n_controls(self) -> int:
        return self.phi.shape[1]

    @property
    def is_linear(self) -> bool:
        return self.kind != NONLINEAR_POISSON

    @cached_property
    def mass_phi(self) -> np.ndarray:
        return np.asarray(self.mass @ self.phi)

    @cached_property
    def mass_factor(self) -> Factorization:
        return factorize(self.mass, "spd")

    @cached_property
    def stiffness_factor(self) -> Factorization:
        kind = "spd" if self.kind != CONVECTION_DIFFUSION else "general"
        return factorize(self.stiffness, kind)

    @cached_property
    def _tri_interior(self):
        # element data for the cubic term: local->interior index (-1 on boundary)
        mesh = self.mesh
        to_interior = np.full(mesh.n_vertices, -1)
        to_interior[mesh.interior] = np.arange(mesh.n_interior)
        local = to_interior[mesh.triangles]
        areas = _triangle_areas(mesh.coords, mesh.triangles)
        return local, areas


# ---------------------------------------------------------------------------
# P1 assembly
# ---------------------------------------------------------------------------

def _triangle_areas(coords, tris):
    p = coords[tris]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def _p1_element_matrices(coords, tris):
    p = coords[tris]
    areas = _triangle_areas(coords, tris)
    # gradients of barycentric coordinates: rows of inv([[1, x, y], ...])
    ones = np.ones(p.shape[:2] + (1,))
    T = np.concatenate([ones, p], axis=2)
    grads = np.linalg.inv(T)[:, 1:, :]  # (n_el, 2, 3)
    k_loc = areas[:, None, None] * np.einsum("eki,ekj->eij", grads, grads)
    m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_loc = areas[:, None, None] * m_ref[None]
    return m_loc, k_loc


def _scatter(local, conn, n):
    rows = np.repeat(conn, conn.shape[1], axis=1).ravel()
    cols = np.tile(conn, (1, conn.shape[1])).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _restrict(A, idx):
    A = A.tocsr()[idx][:, idx].tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def p1_matrices(mesh: Mesh2D) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Full (unrestricted) P1 mass and stiffness matrices."""
    m_loc, k_loc = _p1_element_matrices(mesh.coords, mesh.triangles)
    n = mesh.n_vertices
    return _scatter(m_loc, mesh.triangles, n), _scatter(k_loc, mesh.triangles, n)


def _check_sources_inside(points):
    pts = np.asarray(points)
    if np.any(pts <= 0.0) or np.any(pts >= 1.0):
        raise FemError("source centers must lie strictly inside (0, 1)^2")


def assemble_poisson(mesh: Mesh2D, sources, kind: str = POISSON) -> FemSystem:
    """P1 Galerkin system for ``-Δy (+ y²) = Σ u_i φ_i`` with Gaussian φ_i.

    ``sources`` is a :class:`GaussianSourceGrid` (or anything exposing
    ``centers`` and ``evaluate``); the columns of ``phi`` are nodal values of
    the sources at the interior vertices.
    """
    if kind not in (POISSON, NONLINEAR_POISSON):
        raise ValueError(f"assemble_poisson cannot build kind {kind!r}")
    _check_sources_inside(sources.centers)
    M, K = p1_matrices(mesh)
    phi = sources.evaluate(mesh.interior_coords())
    grid_dim = getattr(sources, "m", 0)
    spacing = getattr(sources, "spacing", float("nan"))
    return FemSystem(
        mesh=mesh,
        mass=_restrict(M, mesh.interior),
        stiffness=_restrict(K, mesh.interior),
        phi=np.ascontiguousarray(phi),
        kind=kind,
        control_points=np.asarray(sources.centers, dtype=float),
        control_spacing=spacing,
        grid_dim=grid_dim,
        sources=sources,
    )


def assemble_nonlinear_poisson(mesh: Mesh2D, sources) -> FemSystem:
    return assemble_poisson(mesh, sources, kind=NONLINEAR_POISSON)


# ---------------------------------------------------------------------------
# Q1 + SUPG assembly
# ---------------------------------------------------------------------------

def default_wind(points: np.ndarray) -> np.ndarray:
    x1, x2 = points[..., 0], points[..., 1]
    return np.stack([2.0 * x2 * (1.0 - x1**2), -2.0 * x1 * (1.0 - x2**2)], axis=-1)


def zero_wind(points: np.ndarray) -> np.ndarray:
    return np.zeros_like(points)


def supg_tau(h_e, w_norm, diffusion: float = 1.0):
    """Element SUPG parameter ``h/(2|w|) (coth Pe - 1/Pe)``, ``Pe = |w| h / (2 diffusion)``."""
    h_e = np.asarray(h_e, dtype=float)
    w_norm = np.asarray(w_norm, dtype=float)
    pe = w_norm * h_e / (2.0 * diffusion)
    xi = np.empty_like(pe)
    small = pe < 1e-3
    # coth(x) - 1/x = x/3 - x^3/45 + ...
    xi[small] = pe[small] / 3.0 - pe[small] ** 3 / 45.0
    big = ~small
    xi[big] = 1.0 / np.tanh(pe[big]) - 1.0 / pe[big]
    tau = np.zeros_like(pe)
    nz = w_norm > 0
    tau[nz] = h_e[nz] / (2.0 * w_norm[nz]) * xi[nz]
    return tau


_GAUSS3 = (
    np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)]),
    np.array([5.0, 8.0, 5.0]) / 9.0,
)


def _q1_reference():
    """Shape values and reference gradients at 3×3 Gauss points on [-1, 1]²."""
    pts, wts = _GAUSS3
    xi, eta = np.meshgrid(pts, pts, indexing="xy")
    xi, eta = xi.ravel(), eta.ravel()
    w = np.outer(wts, wts).ravel()
    sx = np.array([-1.0, 1.0, 1.0, -1.0])  # sw, se, ne, nw
    sy = np.array([-1.0, -1.0, 1.0, 1.0])
    N = 0.25 * (1 + np.outer(xi, sx)) * (1 + np.outer(eta, sy))
    dN_dxi = 0.25 * sx[None, :] * (1 + np.outer(eta, sy))
    dN_deta = 0.25 * sy[None, :] * (1 + np.outer(xi, sx))
    return xi, eta, w, N, dN_dxi, dN_deta


def assemble_convection_diffusion(mesh: Mesh2D, patches: PatchGrid, wind=default_wind) -> FemSystem:
    """Q1 discretization of ``-Δy + w·∇y = Σ u_i χ_i`` with SUPG.

    The stabilization adds ``τ_e (w·∇φ_j, w·∇φ_i)`` to the operator and
    ``τ_e (χ_k, w·∇φ_i)`` to the loads.  ``phi`` holds the mass-matrix
    preimages of the patch load vectors, so ``mass @ phi`` reproduces them.
    """
    n_cells = mesh.n_cells
    if n_cells % patches.m:
        raise FemError(f"{patches.m}x{patches.m} patches do not align with a {n_cells}-cell mesh")
    h = mesh.h
    xi, eta, w, N, dN_dxi, dN_deta = _q1_reference()
    jac = h / 2.0
    detj = jac * jac
    dNx = dN_dxi / jac
    dNy = dN_deta / jac

    sw = mesh.coords[mesh.quads[:, 0]]
    qp = sw[:, None, :] + np.stack([(xi + 1) * jac, (eta + 1) * jac], axis=-1)[None]
    wq = wind(qp)  # (n_el, n_q, 2)
    centers = sw + 0.5 * h
    w_center = wind(centers)
    tau = supg_tau(np.full(len(centers), h), np.linalg.norm(w_center, axis=1))

    grad_dot = dNx.T @ (w[:, None] * dNx) + dNy.T @ (w[:, None] * dNy)
    k_diff = detj * grad_dot
    streamline = wq[..., 0:1] * dNx[None] + wq[..., 1:2] * dNy[None]  # (n_el, n_q, 4)
    # convection: ∫ (w·∇φ_j) φ_i
    k_conv = detj * np.einsum("q,qi,eqj->eij", w, N, streamline)
    k_supg = detj * tau[:, None, None] * np.einsum("q,eqi,eqj->eij", w, streamline, streamline)
    k_loc = k_diff[None] + k_conv + k_supg
    m_loc = detj * (N.T @ (w[:, None] * N))

    n = mesh.n_vertices
    K = _scatter(k_loc, mesh.quads, n)
    M = _scatter(np.broadcast_to(m_loc, k_loc.shape), mesh.quads, n)

    # patch loads: ∫ χ_k (φ_i + τ w·∇φ_i); each cell lies in exactly one patch
    per_patch = n_cells // patches.m
    ci = np.arange(len(centers)) % n_cells
    cj = np.arange(len(centers)) // n_cells
    patch_of_cell = (ci // per_patch) + (cj // per_patch) * patches.m
    b_loc = detj * (w @ N)[None, :] + detj * tau[:, None] * np.einsum("q,eqi->ei", w, streamline)
    loads = sp.coo_matrix(
        (b_loc.ravel(), (mesh.quads.ravel(), np.repeat(patch_of_cell, 4))),
        shape=(n, patches.count),
    ).toarray()

    M_int = _restrict(M, mesh.interior)
    K_int = _restrict(K, mesh.interior)
    b_int = loads[mesh.interior]
    fac = factorize(M_int, "spd")
    phi = fac.solve(b_int)
    return FemSystem(
        mesh=mesh,
        mass=M_int,
        stiffness=K_int,
        phi=np.ascontiguousarray(phi),
        kind=CONVECTION_DIFFUSION,
        control_points=patches.centers,
        control_spacing=patches.spacing,
        grid_dim=patches.m,
        sources=patches,
    )


# ---------------------------------------------------------------------------
# state equation
# ---------------------------------------------------------------------------

def quadratic_term(sys: FemSystem, y: np.ndarray) -> np.ndarray:
    """Galerkin vector ``∫ y_h² φ_i`` over interior test functions (exact for P1)."""
    local, areas = sys._tri_interior
    yl = np.where(local >= 0, y[np.maximum(local, 0)], 0.0)
    a, b, c = yl[:, 0], yl[:, 1], yl[:, 2]
    s = a + b + c
    sq = a * a + b * b + c * c
    # 60/|T| ∫ y² λ_a = 6a² + 2b² + 2c² + 4ab + 4ac + 2bc
    base = sq + s * s
    r = np.column_stack([base + 2 * a * (s + a), base + 2 * b * (s + b), base + 2 * c * (s + c)])
    r *= (areas / 60.0)[:, None]
    mask = local >= 0
    out = np.zeros(sys.n_state)
    np.add.at(out, local[mask], r[mask])
    return out


def quadratic_term_jacobian(sys: FemSystem, y: np.ndarray) -> sp.csr_matrix:
    """Jacobian of :func:`quadratic_term`: ``2 Σ_k y_k ∫ φ_i φ_j φ_k``."""
    local, areas = sys._tri_interior
    yl = np.where(local >= 0, y[np.maximum(local, 0)], 0.0)
    s = yl.sum(axis=1)
    # 60/|T| ∫ λ_a λ_b λ_c = (1 + δ_ab)(1 + δ_ac + δ_bc)
    J = 2.0 * (1.0 + np.eye(3))[None] * (s[:, None, None] + yl[:, :, None] + yl[:, None, :])
    J *= (areas / 60.0)[:, None, None]
    mask = (local[:, :, None] >= 0) & (local[:, None, :] >= 0)
    rows = np.broadcast_to(local[:, :, None], J.shape)[mask]
    cols = np.broadcast_to(local[:, None, :], J.shape)[mask]
    n = sys.n_state
    return sp.coo_matrix((J[mask], (rows, cols)), shape=(n, n)).tocsr()


def nonlinear_residual_and_jacobian(sys: FemSystem, y: np.ndarray, u: np.ndarray):
    """Return ``F(y, u) = K y + ∫y²φ - M Φ u`` with its partial Jacobians."""
    if sys.kind != NONLINEAR_POISSON:
        raise ValueError("nonlinear residual requested for a linear system")
    F = sys.stiffness @ y + quadratic_term(sys, y) - sys.mass_phi @ u
    F_y = (sys.stiffness + quadratic_term_jacobian(sys, y)).tocsr()
    F_u = -sys.mass_phi
    return F, F_y, F_u


def state_residual(sys: FemSystem, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    r = sys.stiffness @ y - sys.mass_phi @ u
    if sys.kind == NONLINEAR_POISSON:
        r = r + quadratic_term(sys, y)
    return r


def solve_state(sys: FemSystem, u: np.ndarray, rtol: float = 1e-10, max_newton: int = 50) -> np.ndarray:
    """Forward map ``u ↦ y``.

    Linear kinds reuse the cached factorization of the stiffness matrix;
    the nonlinear kind runs Newton from the linear solution.
    """
    u = np.asarray(u, dtype=float)
    rhs = sys.mass_phi @ u
    y = sys.stiffness_factor.solve(rhs)
    scale = max(1.0, float(np.linalg.norm(rhs)))
    if sys.is_linear:
        res = np.linalg.norm(sys.stiffness @ y - rhs)
        if res > rtol * scale:
            raise FemError(f"state solve residual {res:.3e} exceeds tolerance")
        return y

    for _ in range(max_newton):
        F, F_y, _ = nonlinear_residual_and_jacobian(sys, y, u)
        res = np.linalg.norm(F)
        if res <= rtol * scale:
            return y
        y = y - factorize(F_y, "general").solve(F)
    res = np.linalg.norm(state_residual(sys, y, u))
    if res <= rtol * scale:
        return y
    raise FemError(f"Newton for the nonlinear state did not converge, residual {res:.3e}")


def interpolate(mesh: Mesh2D, fn) -> np.ndarray:
    """Nodal values of ``fn(points)`` at the interior vertices."""
    return np.asarray(fn(mesh.interior_coords()), dtype=float)


def manufactured_l2_error(h: float) -> float:
    """Discrete L2 error of P1 Poisson for ``y = sin(πx)sin(πy)``."""
    mesh = build_mesh(h)
    M, K = p1_matrices(mesh)
    M = _restrict(M, mesh.interior)
    K = _restrict(K, mesh.interior)

    def exact(p):
        return np.sin(np.pi * p[:, 0]) * np.sin(np.pi * p[:, 1])

    y_ex = interpolate(mesh, exact)
    f = 2.0 * np.pi**2 * y_ex
    y = factorize(K, "spd").solve(M @ f)
    e = y - y_ex
    return float(np.sqrt(e @ (M @ e)))

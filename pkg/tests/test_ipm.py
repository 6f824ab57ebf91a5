import math

import numpy as np
import pytest

from mipdeco import fem
from mipdeco.ipm import (
    Direction,
    IpmConfig,
    IpmState,
    assemble_newton_system,
    convexified_diagonal,
    initial_state,
    ipm_solve,
    multiplier_steps,
    residuals,
    step_lengths,
)
from mipdeco.model import MipdecoProblem, feasibility_gap, lift_control, objective_raw


def _state(n, l, u=0.5, mu=1.0):
    u = np.full(l, u)
    return IpmState(
        y=np.zeros(n), u=u, z=1.0, p=np.zeros(n), q=0.0,
        lam0=mu / u, lam1=mu / (1 - u), lamz=mu, mu=mu,
    )


def test_config_validation():
    with pytest.raises(ValueError):
        IpmConfig(gamma=0.0)
    with pytest.raises(ValueError):
        IpmConfig(boundary_fraction=1.0)


@pytest.mark.parametrize("mu, eta", [(1.0, 0.1), (1e-3, 1e-3), (1e-12, 1e-10)])
def test_gmres_tolerance_rule(mu, eta):
    assert IpmConfig().gmres_tolerance(mu) == eta


def test_theta_and_convexification():
    u = np.full(4, 0.5)
    lam = np.full(4, 2.0)  # μ/(½) with μ = 1
    d = convexified_diagonal(u, lam, lam, 1e5, 1e-6)
    assert np.allclose(d, 8.0 - 2e-5)
    mu = 1e-6
    lam = np.full(4, 2 * mu)
    d = convexified_diagonal(u, lam, lam, 1e-3, 1e-6)
    assert np.all(d == 1e-6)


def test_newton_system_shape_and_diagonal(poisson_small):
    prob = MipdecoProblem(poisson_small, np.zeros(poisson_small.n_state), 2)
    state = _state(prob.n_state, prob.n_controls, mu=1e-6)
    sys = assemble_newton_system(state, prob, 1e-3, 1e-6)
    assert sys.size == 2 * prob.n_state + prob.n_controls + 2
    assert sys.d_u.min() >= 1e-6
    # at a perturbed-complementarity state the RHS is the negated KKT residual
    r = residuals(state, prob, 1e-3)
    assert np.allclose(-sys.rhs[prob.n_state + prob.n_controls + 1 :], r.xi_p)


def test_multiplier_steps_examples():
    st = IpmState(np.zeros(1), np.array([0.5]), 1.0, np.zeros(1), 0.0,
                  np.array([2.0]), np.array([2.0]), 1.0, 1.0)
    d0, d1, dz = multiplier_steps(st, np.array([0.1]), 0.0, 1.0)
    assert d0[0] == pytest.approx(-0.4)
    d0, d1, dz = multiplier_steps(st, np.array([0.0]), 0.0, 1.0)
    assert d0[0] == 0.0 and d1[0] == 0.0 and dz == 0.0


def test_multiplier_linearization():
    # the step solves the linearized complementarity exactly, so the
    # post-step error is the second-order term Δu Δλ
    rng = np.random.default_rng(0)
    u = rng.uniform(0.2, 0.8, 5)
    lam = rng.uniform(0.5, 2, 5)
    mu = 0.1
    st = IpmState(np.zeros(1), u, 1.0, np.zeros(1), 0.0, lam, lam.copy(), 1.0, mu)
    for t in (1e-2, 1e-3):
        du = t * rng.standard_normal(5)
        d0, _, _ = multiplier_steps(st, du, 0.0, mu)
        err = (u + du) * (lam + d0) - mu
        assert np.allclose(err, du * d0, atol=1e-14)


def _dir(l, du, dz=0.0):
    z = np.zeros(l)
    return Direction(np.zeros(1), np.asarray(du, float), dz, np.zeros(1), 0.0, z, z, 0.0)


def test_step_lengths():
    st = IpmState(np.zeros(1), np.array([0.9]), 1.0, np.zeros(1), 0.0,
                  np.array([1.0]), np.array([1.0]), 1.0, 1.0)
    a_p, a_d = step_lengths(st, _dir(1, [1.0]))
    assert a_p == pytest.approx(0.995 * 0.1)
    assert a_d == 1.0
    assert step_lengths(st, _dir(1, [0.0])) == (1.0, 1.0)
    assert step_lengths(st, _dir(1, [-0.01]))[0] == 1.0


def test_initial_state(poisson_small):
    prob = MipdecoProblem(poisson_small, np.zeros(poisson_small.n_state), 2)
    u = np.zeros(prob.n_controls)
    u[0] = 1
    st = initial_state(prob, lift_control(prob, u), IpmConfig())
    assert st.is_interior()
    assert st.u.min() == 0.01 and st.u.max() == 0.99
    assert st.z == pytest.approx(max(2 - st.u.sum(), 0.1))
    assert np.allclose(residuals(st, prob, 1e5).xi_c, 0.0)


def _reduced(prob):
    sys = prob.system
    Y = np.linalg.solve(sys.stiffness.toarray(), sys.mass_phi)
    M = sys.mass.toarray()
    return Y.T @ M @ Y, Y.T @ M @ prob.y_d, 0.5 * prob.y_d @ M @ prob.y_d


def test_inactive_knapsack_relaxation(poisson_small):
    # y_d reachable by a fractional control: the relaxation recovers it
    sys = poisson_small
    u_star = np.linspace(0.2, 0.6, sys.n_controls)
    prob = MipdecoProblem(sys, fem.solve_state(sys, u_star), sys.n_controls)
    x, tr = ipm_solve(prob, math.inf, lift_control(prob, np.full(sys.n_controls, 0.5)), IpmConfig(tol=1e-10))
    assert tr.converged
    assert np.linalg.norm(sys.stiffness @ x.y - sys.mass_phi @ x.u) <= 1e-10
    assert np.all((x.u >= 0) & (x.u <= 1))
    assert objective_raw(prob, x) < 1e-10


def test_small_eps_near_integer(poisson16):
    u = np.zeros(16)
    u[[5, 10]] = 1
    prob = MipdecoProblem(poisson16, fem.solve_state(poisson16, u), 2)
    start = u * 0.9 + 0.05
    x, _ = ipm_solve(prob, 1e-2, lift_control(prob, start))
    assert feasibility_gap(x.u, 2) <= 0.1


def test_trace_contents(poisson_small):
    prob = MipdecoProblem(poisson_small, np.full(poisson_small.n_state, 0.01), 2)
    x, tr = ipm_solve(prob, 1e5, lift_control(prob, np.full(prob.n_controls, 0.1)))
    assert tr.iterations == len(tr.gmres_iterations) == len(tr.mu_values)
    assert all(b <= a for a, b in zip(tr.mu_values, tr.mu_values[1:]))
    assert tr.average_gmres == pytest.approx(np.mean(tr.gmres_iterations))
    assert x.in_X(prob)
    with pytest.raises(ValueError):
        ipm_solve(prob, 0.0, x)


def test_nonlinear_ipm_recovers_target(nonlinear_small):
    u = np.zeros(nonlinear_small.n_controls)
    u[[1, 6]] = 1
    prob = MipdecoProblem(nonlinear_small, fem.solve_state(nonlinear_small, u), 2)
    x, tr = ipm_solve(prob, math.inf, lift_control(prob, np.full(prob.n_controls, 0.2)))
    assert tr.converged
    assert objective_raw(prob, x) < 1e-6

import numpy as np
import pytest

from relaxed_fbsde.adjoint import solve_adjoint
from relaxed_fbsde.bsde import cost, solve_paths
from relaxed_fbsde.builtins import LQParams, builtin
from relaxed_fbsde.hamiltonian import HamiltonianContext, minimize_hamiltonian
from relaxed_fbsde.noise import generate_noise
from relaxed_fbsde.problem import ActionGrid, RelaxedControl, TimeGrid
from relaxed_fbsde.variational import (convergence_probe, directional_derivative, hamiltonian_difference,
                                       solve_variational, variational_inequality_value)

from conftest import scalar_problem

GRID = TimeGrid(1.0, 20)
THETAS = (0.2, 0.1, 0.05, 0.025)


def _nonlinear():
    """Scalar problem with state-nonlinear drift, generator and costs."""
    one = lambda x: np.ones((x.shape[0], 1, 1))
    return scalar_problem(
        x0=0.4,
        b=lambda t, x, a: np.sin(x) + a,
        b_x=lambda t, x, a: np.cos(x)[:, :, None],
        sigma=lambda t, x, a: (0.3 + 0.2 * a[0] ** 2) * (1 + 0.2 * np.tanh(x))[:, :, None],
        sigma_x=lambda t, x, a: ((0.3 + 0.2 * a[0] ** 2) * 0.2 / np.cosh(x) ** 2)[:, :, None, None],
        f=lambda t, x, y, z, a: -(0.5 * np.sin(x) + 0.3 * y + 0.2 * z[:, :, 0] * a[0]),
        f_x=lambda t, x, y, z, a: -0.5 * np.cos(x)[:, :, None],
        f_y=lambda t, x, y, z, a: np.full((x.shape[0], 1, 1), -0.3),
        f_z=lambda t, x, y, z, a: np.full((x.shape[0], 1, 1, 1), -0.2 * a[0]),
        phi=lambda x: np.tanh(x), phi_x=lambda x: (1 / np.cosh(x) ** 2)[:, :, None],
        g=lambda x: np.log(np.cosh(x[:, 0])), g_x=lambda x: np.tanh(x),
        h=lambda y: 0.5 * y[:, 0] ** 2, h_y=lambda y: y.copy(),
        l=lambda t, x, y, z, a: 0.5 * x[:, 0] ** 2 + 0.5 * a[0] ** 2 + 0.1 * z[:, 0, 0],
        l_x=lambda t, x, y, z, a: x.copy(),
        l_z=lambda t, x, y, z, a: np.full((x.shape[0], 1, 1), 0.1),
    )


@pytest.fixture(scope="module")
def noise():
    return generate_noise(GRID, 20_000, 1, seed=31)


def _pair(actions, seed):
    rng = np.random.default_rng(seed)
    mk = lambda: RelaxedControl(rng.dirichlet(np.ones(actions.size), GRID.steps), actions)
    return mk(), mk()


class TestVariationalPaths:
    def test_zero_direction(self, noise):
        problem, actions = builtin("lq")
        mu, _ = _pair(actions, 0)
        sol = solve_paths(problem, mu, noise)
        var = solve_variational(problem, mu, mu, sol, noise)
        assert np.all(var.xt == 0) and np.all(var.yt == 0)
        assert np.allclose(var.zt, 0, atol=1e-14)
        assert variational_inequality_value(problem, sol, var).value == 0.0

    def test_constant_drift_direction(self, noise):
        actions = ActionGrid.uniform(-1, 1, 3)
        p = scalar_problem(b=lambda t, x, a: np.broadcast_to(a, x.shape).copy(),
                           sigma=lambda t, x, a: np.full((x.shape[0], 1, 1), 0.5))
        mu = RelaxedControl(np.tile([1.0, 0, 0], (GRID.steps, 1)), actions)
        q = RelaxedControl(np.tile([0, 0, 1.0], (GRID.steps, 1)), actions)
        sol = solve_paths(p, mu, noise)
        var = solve_variational(p, mu, q, sol, noise)
        # the source is bbar(q) - bbar(mu) = a1 - a0 = 2
        assert np.allclose(var.xt[:, :, 0], 2.0 * GRID.nodes, atol=1e-13)

    def test_boundaries_exact(self, noise):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, 1)
        sol = solve_paths(problem, mu, noise)
        var = solve_variational(problem, mu, q, sol, noise)
        assert np.all(var.xt[:, 0] == 0)
        xN = sol.x[:, -1]
        assert np.array_equal(var.yt[:, -1], np.einsum("mjk,mk->mj", problem.phi_x(xN), var.xt[:, -1]))

    def test_finite_difference_of_state(self, noise):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, 2)
        theta = 1e-3
        sol = solve_paths(problem, mu, noise)
        var = solve_variational(problem, mu, q, sol, noise)
        sol_th = solve_paths(problem, mu.perturb(q, theta), noise)
        fd = (sol_th.x - sol.x) / theta
        # the LQ forward equation is affine in the measure, so the difference quotient is exact
        assert np.allclose(fd, var.xt, atol=1e-8)


class TestDuality:
    @pytest.mark.parametrize("seed", [3, 4])
    def test_lq_identity(self, noise, seed):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, seed)
        sol = solve_paths(problem, mu, noise)
        adj = solve_adjoint(problem, mu, sol, noise)
        d = variational_inequality_value(problem, sol, solve_variational(problem, mu, q, sol, noise))
        h = hamiltonian_difference(problem, mu, q, sol, adj)
        assert abs(d.value - h.value) <= 3 * np.hypot(d.stderr, h.stderr)

    def test_nonlinear_identity(self, noise):
        problem = _nonlinear()
        actions = ActionGrid.uniform(-1, 1, 5)
        mu, q = _pair(actions, 5)
        sol = solve_paths(problem, mu, noise)
        adj = solve_adjoint(problem, mu, sol, noise)
        d = variational_inequality_value(problem, sol, solve_variational(problem, mu, q, sol, noise))
        h = hamiltonian_difference(problem, mu, q, sol, adj)
        assert abs(d.value - h.value) <= 3 * np.hypot(d.stderr, h.stderr) + 0.02 * abs(h.value)

    def test_hamiltonian_minimizer_is_descent(self, noise):
        problem, actions = builtin("lq")
        mu = RelaxedControl(np.tile(np.eye(actions.size)[-1], (GRID.steps, 1)), actions)  # constant a = 2
        sol = solve_paths(problem, mu, noise)
        adj = solve_adjoint(problem, mu, sol, noise)
        idx = [minimize_hamiltonian(problem, HamiltonianContext.at_step(sol, adj, i), actions)[0] for i in range(GRID.steps)]
        q = RelaxedControl(np.eye(actions.size)[idx], actions)
        d = variational_inequality_value(problem, sol, solve_variational(problem, mu, q, sol, noise))
        assert d.value < -5 * d.stderr


class TestDerivative:
    def test_quotients_extrapolate_to_delta(self, noise):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, 6)
        sol = solve_paths(problem, mu, noise)
        d = variational_inequality_value(problem, sol, solve_variational(problem, mu, q, sol, noise))
        dd = directional_derivative(problem, mu, q, THETAS, noise, base=cost(problem, mu, sol))
        assert abs(dd.intercept - d.value) <= 3 * np.hypot(dd.intercept_stderr, d.stderr)


class TestConvergence:
    def test_lq_columns_decrease(self, noise):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, 7)
        table = convergence_probe(problem, mu, q, THETAS, noise)
        for col in ("dx2", "dy2", "dz2", "gx2", "gy2", "gz2"):
            assert table.monotone(col), col
        assert 1.6 <= table.slope("dx2") <= 2.4

    def test_nonlinear_convergence(self, noise):
        problem = _nonlinear()
        actions = ActionGrid.uniform(-1, 1, 5)
        mu, q = _pair(actions, 8)
        table = convergence_probe(problem, mu, q, THETAS, noise)
        for col in ("dx2", "dy2", "dz2", "gx2", "gy2"):
            assert table.monotone(col), col
        # the first-order residual shrinks faster than the raw difference
        assert table.gx2[-1] / table.gx2[0] < table.dx2[-1] / table.dx2[0] * 4
        assert 1.6 <= table.slope("dx2") <= 2.4

    def test_zero_direction_columns_vanish(self, noise):
        problem, actions = builtin("lq")
        mu, _ = _pair(actions, 9)
        table = convergence_probe(problem, mu, mu, THETAS, noise.subset(2000))
        for col in ("dx2", "dy2", "dz2", "gx2", "gy2", "gz2"):
            assert np.all(table.column(col) == 0), col

    def test_schedule_validated(self, noise):
        problem, actions = builtin("lq")
        mu, q = _pair(actions, 0)
        with pytest.raises(ValueError):
            convergence_probe(problem, mu, q, (0.1, 0.2), noise)


def test_nonlinear_fixture_derivatives_are_consistent():
    from relaxed_fbsde.problem import validate_problem
    assert validate_problem(_nonlinear(), ActionGrid.uniform(-1, 1, 5), tol=1e-6).passed

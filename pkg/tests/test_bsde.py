import numpy as np
import pytest

from relaxed_fbsde.bsde import Projector, RegressionBasis, cost, solve_backward, solve_linear_bsde, solve_paths
from relaxed_fbsde.noise import generate_noise
from relaxed_fbsde.problem import RelaxedControl, TimeGrid

GRID = TimeGrid(1.0, 20)


def _unit_vol(t, x, a):
    return np.ones((x.shape[0], 1, 1))


@pytest.fixture(scope="module")
def noise():
    return generate_noise(GRID, 20_000, 1, seed=3)


@pytest.fixture
def uniform(two_point):
    return RelaxedControl.uniform(two_point, GRID.steps)


class TestBasis:
    def test_design_size_matches_monomial_count(self):
        basis = RegressionBasis(degree=2)
        X = basis.design(np.random.default_rng(0).normal(size=(50, 3)))
        assert X.shape == (50, basis.size(3)) == (50, 10)

    def test_projection_reproduces_quadratics(self):
        rng = np.random.default_rng(1)
        feats = rng.normal(size=(300, 2))
        basis = RegressionBasis(degree=2)
        proj = Projector(basis.design(feats), basis.rcond, basis.size(2), 0)
        target = (1 + feats[:, 0] * feats[:, 1] - 3 * feats[:, 1] ** 2)[:, None]
        assert np.allclose(proj(target), target, atol=1e-10)

    def test_constant_features_flag_rank_deficiency(self):
        basis = RegressionBasis(degree=2)
        proj = Projector(basis.design(np.ones((40, 1))), basis.rcond, basis.size(1), 7)
        assert proj.diagnostic.rank_deficient and proj.diagnostic.step == 7


class TestBackward:
    def test_constant_terminal(self, make_problem, uniform, noise):
        p = make_problem(phi=lambda x: np.full((x.shape[0], 1), 2.5))
        sol = solve_paths(p, uniform, noise)
        assert np.allclose(sol.y, 2.5, atol=1e-12)
        assert np.allclose(sol.z, 0.0, atol=1e-12)

    def test_martingale_terminal_recovers_volatility(self, make_problem, uniform, noise):
        p = make_problem(sigma=_unit_vol, phi=lambda x: x.copy())
        sol = solve_paths(p, uniform, noise)
        # y_i = E[x_N | x_i] = x_i and z = 1
        assert np.sqrt(np.mean((sol.y - sol.x) ** 2)) < 0.01
        assert abs(sol.y[0, 0, 0]) < 3 / np.sqrt(noise.paths)
        assert np.abs(sol.z.mean(axis=0) - 1.0).max() < 0.02

    def test_linear_generator_growth(self, make_problem, uniform, noise):
        p = make_problem(sigma=_unit_vol, phi=lambda x: np.ones((x.shape[0], 1)),
                         f=lambda t, x, y, z, a: 0.5 * y)
        sol = solve_paths(p, uniform, noise)
        # explicit scheme gives (1 + dt/2)^N, within 1% of e^{1/2}
        assert sol.y[0, 0, 0] == pytest.approx((1 + GRID.dt / 2) ** GRID.steps, rel=1e-10)
        assert sol.y[0, 0, 0] == pytest.approx(np.exp(0.5), rel=0.01)

    def test_custom_features_are_used(self, make_problem, uniform, noise):
        p = make_problem(sigma=_unit_vol, phi=lambda x: x ** 2)
        x = solve_paths(p, uniform, noise).x
        sol = solve_backward(p, uniform, x, noise, features=np.zeros_like(x))
        # with no information the regression returns the unconditional mean
        assert np.allclose(sol.y[:, 10], np.mean(x[:, -1] ** 2), atol=1e-10)


class TestLinear:
    def _run(self, noise, A=None, c=None):
        M = noise.paths
        feats = np.zeros((M, GRID.steps + 1, 1))
        coef = lambda i: (None if A is None else np.full((M, 1, 1), A), None, None if c is None else np.full((M, 1), c))
        term = np.ones((M, 1)) if c is None else np.zeros((M, 1))
        return solve_linear_bsde(coef, term, feats, noise)

    def test_exponential(self, noise):
        sol = self._run(noise, A=0.7)
        assert sol.y[0, 0, 0] == pytest.approx(np.exp(0.7), rel=0.02)

    def test_constant_source(self, noise):
        sol = self._run(noise, c=1.0)
        assert sol.y[0, 0, 0] == pytest.approx(1.0, abs=1e-12)


class TestCost:
    def test_running_unit_cost_is_horizon(self, make_problem, uniform, noise):
        p = make_problem(l=lambda t, x, y, z, a: np.ones(x.shape[0]))
        est = cost(p, uniform, solve_paths(p, uniform, noise))
        assert est.value == pytest.approx(1.0, abs=1e-12)
        assert est.stderr == pytest.approx(0.0, abs=1e-12)

    def test_terminal_cost_of_driftless_state(self, make_problem, uniform, noise):
        p = make_problem(x0=1.3, sigma=_unit_vol, g=lambda x: x[:, 0].copy())
        est = cost(p, uniform, solve_paths(p, uniform, noise))
        assert abs(est.value - 1.3) < 3 * est.stderr

    def test_mixed_running_cost(self, make_problem, two_point, noise):
        p = make_problem(l=lambda t, x, y, z, a: np.full(x.shape[0], float(a[0])))
        q = RelaxedControl(np.tile([0.2, 0.8], (GRID.steps, 1)), two_point)
        assert cost(p, q, solve_paths(p, q, noise)).value == pytest.approx(0.8, abs=1e-12)

    def test_stderr_rate(self, make_problem, uniform):
        p = make_problem(sigma=_unit_vol, g=lambda x: x[:, 0] ** 2)
        se = []
        for M in (2_000, 8_000, 32_000):
            nz = generate_noise(GRID, M, 1, seed=9)
            se.append(cost(p, uniform, solve_paths(p, uniform, nz)).stderr)
        ratios = np.array(se[:-1]) / np.array(se[1:])
        assert np.all((ratios > 1.7) & (ratios < 2.4))

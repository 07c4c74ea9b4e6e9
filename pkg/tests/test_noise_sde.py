import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaxed_fbsde.mixing import mix
from relaxed_fbsde.noise import generate_noise, path_normals
from relaxed_fbsde.problem import ActionGrid, RelaxedControl, StrictControl, TimeGrid, dirac_embed
from relaxed_fbsde.sde import NumericalAbort, simulate_forward

from conftest import scalar_problem


def _drift_a(t, x, a):
    return np.broadcast_to(np.asarray(a, dtype=float), x.shape).copy()


class TestNoise:
    def test_same_seed_same_bits(self, unit_grid):
        a = generate_noise(unit_grid, 500, 2, seed=11)
        b = generate_noise(unit_grid, 500, 2, seed=11)
        assert a.dw.tobytes() == b.dw.tobytes()

    @pytest.mark.parametrize("workers", [2, 3, 8])
    def test_worker_count_never_changes_values(self, workers):
        ref = path_normals(5, 1000, 7, workers=1)
        assert path_normals(5, 1000, 7, workers=workers).tobytes() == ref.tobytes()
        assert path_normals(5, 1000, 7, workers=workers, chunk=13).tobytes() == ref.tobytes()

    def test_prefix_stability(self):
        # a path's stream does not depend on how many paths are drawn
        assert np.array_equal(path_normals(3, 10, 6), path_normals(3, 250, 6)[:10])

    def test_increment_variance(self):
        grid = TimeGrid(1.0, 50)
        dw = generate_noise(grid, 100_000, 1, seed=1).dw
        # sample variance of 5e6 draws: relative stderr about 6e-4
        assert dw.var() / grid.dt == pytest.approx(1.0, abs=3e-3)
        assert abs(dw.mean()) < 3 * np.sqrt(grid.dt / dw.size) * 1.5

    def test_distinct_seeds_uncorrelated(self):
        a = path_normals(1, 20_000, 5).ravel()
        b = path_normals(2, 20_000, 5).ravel()
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.01

    def test_coarsen_sums_increments(self):
        noise = generate_noise(TimeGrid(1.0, 8), 50, 1, seed=0)
        c = noise.coarsen(4)
        assert c.grid.steps == 2
        assert np.allclose(c.dw[:, 0], noise.dw[:, :4].sum(axis=1), atol=1e-15)
        with pytest.raises(ValueError):
            noise.coarsen(3)

    def test_initial_draws_are_separate_columns(self, unit_grid):
        noise = generate_noise(unit_grid, 20, 1, seed=4, initial_dim=1)
        assert noise.initial.shape == (20, 1)
        flat = path_normals(4, 20, 11)
        assert np.array_equal(noise.initial[:, 0], flat[:, 0])


class TestForward:
    def test_zero_coefficients_keep_initial_state(self, make_problem, unit_grid, two_point):
        p = make_problem(x0=0.7)
        noise = generate_noise(unit_grid, 100, 1, seed=0)
        x = simulate_forward(p, RelaxedControl.uniform(two_point, 10), noise)
        assert np.all(x == 0.7)

    def test_unit_drift_reaches_one(self, make_problem, two_point):
        grid = TimeGrid(1.0, 10)
        p = make_problem(b=lambda t, x, a: np.ones_like(x))
        noise = generate_noise(grid, 4, 1, seed=0)
        x = simulate_forward(p, RelaxedControl.uniform(two_point, 10), noise)
        assert np.allclose(x[:, -1], 1.0, atol=1e-14, rtol=0)

    def test_ornstein_uhlenbeck_mean(self, make_problem, two_point):
        grid = TimeGrid(1.0, 50)
        p = make_problem(x0=1.0, b=lambda t, x, a: -x, sigma=lambda t, x, a: np.ones((x.shape[0], 1, 1)))
        noise = generate_noise(grid, 100_000, 1, seed=8)
        x = simulate_forward(p, RelaxedControl.uniform(two_point, 50), noise)
        xt = x[:, -1, 0]
        # Euler mean is exactly (1 - dt)^N, within O(dt) of exp(-1)
        se = xt.std(ddof=1) / np.sqrt(xt.size)
        assert abs(xt.mean() - (1 - grid.dt) ** 50) < 3 * se
        assert abs(xt.mean() - np.exp(-1)) < 3 * se + 0.01

    def test_dirac_embedding_is_bit_identical(self, make_problem, unit_grid):
        grid = ActionGrid.uniform(-1, 1, 5)
        p = make_problem(x0=0.3, b=lambda t, x, a: np.sin(x) * a, sigma=lambda t, x, a: (0.2 + a[0] ** 2) * np.cos(x)[:, :, None])
        noise = generate_noise(unit_grid, 200, 1, seed=2)
        u = StrictControl(np.array([0, 4, 2, 1, 3, 3, 0, 4, 1, 2]), grid)
        assert simulate_forward(p, u, noise).tobytes() == simulate_forward(p, dirac_embed(u), noise).tobytes()

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=10, max_size=10))
    def test_drift_is_linear_in_the_measure(self, ws):
        grid = TimeGrid(1.0, 10)
        two_point = ActionGrid(np.array([[0.0], [1.0]]), 0.0, 1.0)
        w = np.array(ws)
        q = RelaxedControl(np.stack([1 - w, w], axis=1), two_point)
        noise = generate_noise(grid, 3, 1, seed=0)
        x = simulate_forward(scalar_problem(b=_drift_a), q, noise)
        assert np.allclose(x[:, -1, 0], w.sum() * grid.dt, atol=1e-12)

    def test_mixing_single_step(self, two_point):
        q = RelaxedControl(np.array([[0.25, 0.75]]), two_point)
        out = mix(q, 0, _drift_a, 0.0, np.zeros((4, 1)))
        assert np.allclose(out, 0.75)

    def test_blow_up_aborts(self, make_problem, two_point):
        grid = TimeGrid(1.0, 40)
        p = make_problem(x0=10.0, b=lambda t, x, a: x ** 3)
        noise = generate_noise(grid, 5, 1, seed=0)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalAbort) as err:
            simulate_forward(p, RelaxedControl.uniform(two_point, 40), noise)
        assert err.value.step > 0

    def test_step_mismatch_rejected(self, make_problem, two_point, unit_grid):
        noise = generate_noise(unit_grid, 5, 1, seed=0)
        with pytest.raises(ValueError):
            simulate_forward(make_problem(), RelaxedControl.uniform(two_point, 7), noise)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relaxed_fbsde.builtins import BANG_BANG_DEFAULTS, LQParams, bang_bang_grid, builtin, lq_problem
from relaxed_fbsde.chattering import apportion, chatter_project, frequency_error, slot_sequence, stability_check, value_gap
from relaxed_fbsde.lq_oracle import optimal_relaxed_two_point
from relaxed_fbsde.noise import generate_noise
from relaxed_fbsde.problem import ActionGrid, RelaxedControl, TimeGrid

from conftest import scalar_problem

R_LEVELS = (1, 2, 4, 8, 16)


class TestProjection:
    def test_dirac_rows_stay_put(self):
        grid = ActionGrid.uniform(0, 1, 3)
        q = RelaxedControl(np.eye(3)[[2, 0, 1]], grid)
        for r in (1, 3, 8):
            assert np.array_equal(chatter_project(q, r).indices, np.repeat([2, 0, 1], r))

    def test_even_split(self, two_point):
        q = RelaxedControl(np.full((3, 2), 0.5), two_point)
        assert list(chatter_project(q, 2).indices) == [0, 1] * 3

    def test_thirds(self, two_point):
        q = RelaxedControl(np.array([[1 / 3, 2 / 3]]), two_point)
        u = chatter_project(q, 6)
        assert np.bincount(u.indices, minlength=2).tolist() == [2, 4]
        assert frequency_error(q, u, 6) == pytest.approx(0.0, abs=1e-15)
        # interleaved, heavier action first
        assert list(u.indices) == [1, 0, 1, 0, 1, 1]

    def test_single_slot_tie_goes_low(self, two_point):
        q = RelaxedControl(np.array([[0.5, 0.5]]), two_point)
        assert list(chatter_project(q, 1).indices) == [0]

    def test_refinement_must_be_positive(self, two_point):
        with pytest.raises(ValueError):
            chatter_project(RelaxedControl.uniform(two_point, 2), 0)

    @settings(max_examples=200)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=7).filter(lambda v: sum(v) > 1e-3),
           st.integers(1, 64))
    def test_counts_track_quota(self, raw, r):
        w = np.array(raw) / sum(raw)
        counts = apportion(w, r)
        assert counts.sum() == r and np.all(counts >= 0)
        assert np.all(np.abs(counts - w * r) < 1.0 + 1e-9)
        seq = slot_sequence(w, r)
        assert np.array_equal(np.bincount(seq, minlength=w.size), counts)


@pytest.fixture(scope="module")
def fine_noise():
    return generate_noise(TimeGrid(1.0, 10 * R_LEVELS[-1]), 4_000, 1, seed=12)


class TestStability:
    def test_dirac_control_has_no_gap(self, fine_noise):
        problem, _ = builtin("bang_bang")
        q = RelaxedControl(np.eye(2)[np.arange(10) % 2], bang_bang_grid())
        tab = stability_check(problem, q, R_LEVELS, fine_noise)
        for c in ("dx2", "dy2", "dz2", "cost_gap"):
            assert np.all(tab.column(c) == 0), c

    def test_converges_with_action_free_volatility(self, fine_noise):
        problem = lq_problem(LQParams(S1=0.0))
        q = RelaxedControl(np.full((10, 2), 0.5), bang_bang_grid())
        tab = stability_check(problem, q, R_LEVELS, fine_noise, batches=4)
        for c in ("dx2", "dy2", "cost_gap"):
            assert tab.monotone(c), c
        # the drift mismatch is a sawtooth of height dt/r: second moment falls like r^-2
        assert np.allclose(tab.dx2[2:] / tab.dx2[1:-1], 0.25, rtol=1e-6)
        assert tab.cost_gap[-1] <= 5 * tab.cost_gap[0] / 4
        assert tab.freq_error[0] == 0.5 and np.all(tab.freq_error[1:] == 0)

    def test_action_dependent_volatility_plateaus(self, fine_noise):
        # the chattered diffusion switches between two volatilities on independent
        # increments, so the pathwise gap cannot vanish with r
        problem = lq_problem(LQParams(S1=0.3))
        q = RelaxedControl(np.full((10, 2), 0.5), bang_bang_grid())
        tab = stability_check(problem, q, R_LEVELS, fine_noise, batches=4)
        assert tab.dx2[-1] > 0.5 * tab.dx2[1]
        assert tab.monotone("dx2")

    def test_refinements_validated(self, fine_noise, two_point):
        problem = lq_problem()
        q = RelaxedControl.uniform(two_point, 10)
        with pytest.raises(ValueError):
            stability_check(problem, q, (1, 4, 2), fine_noise)
        with pytest.raises(ValueError):
            stability_check(problem, q, (1, 2, 4), fine_noise)


class TestValueGap:
    def test_control_free_problem(self, two_point):
        p = scalar_problem(x0=1.0, g=lambda x: x[:, 0] ** 2, sigma=lambda t, x, a: np.ones((x.shape[0], 1, 1)))
        nz = generate_noise(TimeGrid(1.0, 4), 500, 1, seed=0)
        res = value_gap(p, two_point, RelaxedControl.uniform(two_point, 4), nz)
        assert res.gap == 0.0 and res.exhaustive and res.enumerated == 16

    def test_bang_bang_exhaustive(self):
        problem, actions = builtin("bang_bang")
        grid = TimeGrid(1.0, 6)
        relaxed = optimal_relaxed_two_point(BANG_BANG_DEFAULTS, grid)
        mu = RelaxedControl(np.stack([(1 - relaxed.actions) / 2, (1 + relaxed.actions) / 2], axis=1), actions)
        nz = generate_noise(grid, 2_000, 1, seed=5)
        res = value_gap(problem, actions, mu, nz)
        assert res.exhaustive and res.enumerated == 64
        assert np.all(res.strict_argmin == 0)
        assert res.gap <= 3 * res.gap_stderr + 1e-12

    def test_sampling_beyond_budget_warns(self, two_point):
        p = scalar_problem()
        nz = generate_noise(TimeGrid(1.0, 12), 50, 1, seed=0)
        with pytest.warns(RuntimeWarning):
            res = value_gap(p, two_point, RelaxedControl.uniform(two_point, 12), nz, budget=100, samples=8)
        assert not res.exhaustive and res.enumerated == 8


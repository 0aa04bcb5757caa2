"""Tests for seeded path ensembles, hitting times and Markov-state binning"""

import json

import numpy as np
import pytest

from components.errors import ConfigurationError, EmptyEnsembleError, UnknownScenarioError
from components.montecarlo_paths import (
    NOT_STOPPED,
    BarrierRule,
    MarkovStateBinner,
    PathSimulator,
    TimeGrid,
    bundled_spec,
    conditional_estimate,
    corrected_bracket,
    exit_time_mean,
    hit_time,
    overshoot_step,
    prefix_matches,
    simulate,
)
from config.lab_config import BarrierKind, MonteCarloSettings

SIGMAS = 5.0


def assert_within_band(value, target, stderr, msg=""):
    assert abs(value - target) <= SIGMAS * stderr, f"{msg}: {value:.5f} vs {target:.5f} (se {stderr:.2e})"


class TestTimeGrid:
    """Uniform grids"""

    def test_with_step(self):
        grid = TimeGrid.with_step(0.0, 1.0 - 2.0 ** -6, 2.0 ** -9)
        assert grid.steps == 504
        assert grid.dt == pytest.approx(2.0 ** -9)

    def test_rejects_empty_grid(self):
        with pytest.raises(ConfigurationError):
            TimeGrid(0.0, 1.0, 0)

    def test_coarsen(self):
        assert TimeGrid(0.0, 1.0, 64).coarsen(4).steps == 16
        with pytest.raises(ConfigurationError):
            TimeGrid(0.0, 1.0, 64).coarsen(5)


class TestSimulation:
    """Seeded generation and the integrated channels"""

    def test_increments_look_brownian(self, brownian_paths):
        assert brownian_paths.increment_check()["passed"]

    def test_brownian_bracket_is_time(self, brownian_paths):
        assert np.allclose(brownian_paths.channel("bracket")[:, -1], 1.0, atol=1e-12)
        assert np.allclose(brownian_paths.channel("M"), brownian_paths.channel("W"), atol=1e-12)

    def test_same_seed_same_paths(self):
        spec, grid = bundled_spec("brownian"), TimeGrid(0.0, 1.0, 16)
        a = simulate(spec, grid, 100, seed=5)
        b = simulate(spec, grid, 100, seed=5)
        assert np.array_equal(a.brownian, b.brownian)

    def test_worker_count_does_not_change_paths(self):
        spec, grid = bundled_spec("time-change"), TimeGrid(0.0, 0.75, 16)
        serial = PathSimulator(MonteCarloSettings(block_size=64, workers=1)).simulate(spec, grid, 300, 9)
        threaded = PathSimulator(MonteCarloSettings(block_size=64, workers=3)).simulate(spec, grid, 300, 9)
        assert np.array_equal(serial.channel("M"), threaded.channel("M"))

    def test_singular_spec_needs_grid_before_singularity(self):
        with pytest.raises(ConfigurationError):
            simulate(bundled_spec("time-change"), TimeGrid(0.0, 1.0, 16), 10, seed=0)

    def test_unknown_spec(self):
        with pytest.raises(UnknownScenarioError) as info:
            bundled_spec("levy")
        assert "brownian" in info.value.known

    def test_no_paths(self):
        with pytest.raises(EmptyEnsembleError):
            simulate(bundled_spec("brownian"), TimeGrid(0.0, 1.0, 4), 0, seed=0)

    def test_exponential_density_has_unit_mean(self):
        ensemble = simulate(bundled_spec("brownian-exponential"), TimeGrid(0.0, 1.0, 32), 20_000, seed=2)
        terminal = ensemble.channel("density")[:, -1]
        assert_within_band(terminal.mean(), 1.0, terminal.std() / np.sqrt(terminal.size), "E[density_T]")

    def test_prefix_is_recomputable(self, stopped_time_change_paths):
        ensemble, spec = stopped_time_change_paths
        assert prefix_matches(spec, ensemble, 40)

    def test_with_channel_checks_shape(self, brownian_paths):
        with pytest.raises(ConfigurationError):
            brownian_paths.with_channel("bad", np.zeros(3))

    def test_export_raw(self, tmp_path):
        ensemble = simulate(bundled_spec("brownian"), TimeGrid(0.0, 1.0, 8), 5, seed=1)
        header_path = ensemble.export_raw(tmp_path / "paths.bin")
        header = json.loads(header_path.read_text())
        assert header["channels"] == ["W", "M", "bracket"]
        assert (tmp_path / "paths.bin").stat().st_size == 3 * 5 * 9 * 8


class TestStopping:
    """Barrier hitting on the stopped time-changed martingale"""

    def test_stopped_paths_are_frozen(self, stopped_time_change_paths):
        ensemble, spec = stopped_time_change_paths
        tau = hit_time(ensemble, "M", spec.stop_rule)
        m = ensemble.channel("M")
        for row in np.flatnonzero(tau.stopped)[:200]:
            assert np.all(m[row, tau.index[row]:] == m[row, tau.index[row]])
            assert abs(m[row, tau.index[row]]) > 1.0

    def test_most_paths_stop(self, stopped_time_change_paths):
        ensemble, spec = stopped_time_change_paths
        assert hit_time(ensemble, "M", spec.stop_rule).stopped_fraction > 0.97

    def test_bracket_at_exit_matches_exit_time(self, stopped_time_change_paths):
        ensemble, spec = stopped_time_change_paths
        tau = hit_time(ensemble, "M", spec.stop_rule)
        grid = ensemble.grid
        horizon = float(np.sum(grid.dt / (1.0 - grid.times()[:-1])))
        corrected = corrected_bracket(ensemble, tau, spec.stop_rule.level)
        stderr = corrected.std(ddof=1) / np.sqrt(corrected.size)
        assert abs(corrected.mean() - exit_time_mean(horizon)) <= 3.0 * stderr
        assert np.allclose(corrected[~tau.stopped], horizon)

    def test_never_fired_is_marked(self, brownian_paths):
        tau = hit_time(brownian_paths, "M", BarrierRule(BarrierKind.ABOVE, 100.0))
        assert np.all(tau.index == NOT_STOPPED)
        assert np.all(tau.capped() == brownian_paths.grid.steps)

    def test_overshoot_step_is_one_bracket_step(self, brownian_paths):
        tau = hit_time(brownian_paths, "M", BarrierRule(BarrierKind.ABS_ABOVE, 0.5))
        assert overshoot_step(brownian_paths, tau) == pytest.approx(brownian_paths.grid.dt)


class TestBinning:
    """Binned conditional expectations through the Markov state"""

    def test_brownian_conditional_mean_is_state(self, brownian_paths):
        binner = MarkovStateBinner("W", n_bins=6, min_count=50)
        estimates = conditional_estimate(brownian_paths, brownian_paths.brownian[:, -1], binner, 32)
        assert len(estimates) == 6
        for e in estimates:
            assert e.usable
            assert_within_band(e.mean, e.state_mean, e.stderr, f"bin [{e.lower:.2f}, {e.upper:.2f}]")

    def test_target_shape_checked(self, brownian_paths):
        with pytest.raises(ConfigurationError):
            conditional_estimate(brownian_paths, np.zeros(3), MarkovStateBinner("W"), 10)


class TestExitTime:
    """E[min(T, h)] for the exit time of (-c, c)"""

    def test_unbounded_horizon(self):
        assert exit_time_mean(np.inf) == 1.0
        assert exit_time_mean(np.inf, level=2.0) == 4.0

    def test_short_horizon_is_horizon(self):
        assert exit_time_mean(1e-3) == pytest.approx(1e-3, rel=1e-6)

    @pytest.mark.parametrize("level", [0.5, 1.0, 3.0])
    def test_scaling(self, level):
        assert exit_time_mean(2.0 * level ** 2, level) == pytest.approx(level ** 2 * exit_time_mean(2.0))

    def test_increases_to_one(self):
        values = [exit_time_mean(h) for h in (0.5, 1.0, 2.0, 4.0, 8.0)]
        assert values == sorted(values)
        assert values[-1] == pytest.approx(1.0, abs=1e-3)

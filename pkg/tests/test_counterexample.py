"""Tests for the explicit quadratic BSDE whose exponential moment blows up"""

import numpy as np
import pytest

from components.counterexample import (
    DIVERGENT_LIMIT,
    FINITE_LIMIT,
    build_scenario,
    clock_horizon,
    counterexample_grid,
    moment_blowup_scan,
    moment_oracle,
    refinement_order,
    verify_solution,
)
from components.errors import ConfigurationError
from components.montecarlo_paths import exit_time_mean
from config.lab_config import CounterexampleSettings, Verdict


@pytest.fixture(scope="module")
def scenario():
    return build_scenario(k=6, n_paths=4_000, seed=17, keep_paths=True,
                          settings=CounterexampleSettings(block_size=500))


class TestGrid:
    """Horizon 1 - 2^-k with step 2^-(k + offset)"""

    def test_rejects_coarse_horizon(self):
        with pytest.raises(ConfigurationError):
            counterexample_grid(5)

    def test_grid_constants(self):
        grid = counterexample_grid(6)
        assert grid.t_end == pytest.approx(1.0 - 2.0 ** -6)
        assert grid.dt == pytest.approx(2.0 ** -9)
        assert grid.steps == 504


class TestOracle:
    """sec bracket of the exponential moment"""

    def test_bracket_values(self):
        oracle = moment_oracle(1.0)
        assert oracle["lo"] == pytest.approx(1.0 / np.cos(np.sqrt(2.0) / 3.0))
        assert oracle["hi"] == pytest.approx(1.0 / np.cos(np.sqrt(2.0)))
        assert 1.0 < oracle["lo"] < oracle["hi"]

    @pytest.mark.parametrize("lam", [-0.1, FINITE_LIMIT, 2.0, DIVERGENT_LIMIT])
    def test_no_bracket_outside_finite_regime(self, lam):
        assert moment_oracle(lam) is None


class TestSolution:
    """Pathwise checks of the explicit solution"""

    def test_scenario_summary(self, scenario):
        assert scenario.n_paths == 4_000
        assert scenario.y0 == pytest.approx(-np.log(2.0))
        assert scenario.stopped_fraction > 0.97
        assert {"ZM", "ZM_bracket", "Y", "Z"} <= set(scenario.ensemble.channels)

    def test_verification_passes(self, scenario):
        report = verify_solution(scenario)
        assert report.passed, report.to_dict()
        assert report.residual_after_tau == 0.0
        assert report.identity_gap <= 1e-12
        assert report.z2_channel_gap <= 1e-10

    def test_bracket_at_exit_matches_exit_time(self, scenario):
        bracket = verify_solution(scenario).bracket_at_tau
        assert bracket["oracle"] == pytest.approx(exit_time_mean(clock_horizon(scenario.grid)))
        assert 0.99 < bracket["oracle"] < 1.0
        assert abs(bracket["mean"] - bracket["oracle"]) <= 3.0 * bracket["stderr"]
        assert bracket["raw_mean"] > bracket["oracle"]

    def test_bracket_check_gates_the_report(self, scenario):
        report = verify_solution(scenario)
        report.bracket_at_tau = {**report.bracket_at_tau, "mean": report.bracket_at_tau["oracle"] + 0.5}
        assert not report.passed

    def test_zm_bmo_is_reported(self, scenario):
        zm = verify_solution(scenario).metadata["zm_bmo"]
        assert np.isfinite(zm["full"]) and zm["full"] > 0.0
        assert np.isfinite(zm["half"])

    def test_summary_only_scenario(self):
        light = build_scenario(k=6, n_paths=256, seed=2)
        assert light.ensemble is None
        assert "zm_bmo" not in verify_solution(light).metadata


class TestBlowupScan:
    """Exponential moments of ∫Z² across λ"""

    def test_finite_regime(self, scenario):
        report = moment_blowup_scan(scenario, [0.0, 1.0])
        rows = {row["lambda"]: row for row in report.rows}
        assert rows[0.0]["estimate"] == 1.0
        assert rows[0.0]["verdict"] == Verdict.FINITE.value
        assert rows[1.0]["regime"] == "finite"
        assert rows[1.0]["in_bracket"]
        assert report.passed

    def test_frame_columns(self, scenario):
        frame = moment_blowup_scan(scenario, [0.0, 1.0, 12.0]).frame()
        assert list(frame.columns) == ["lambda", "estimate", "stderr", "verdict", "regime"]
        assert list(frame["regime"]) == ["finite", "finite", "divergent"]

    def test_descriptive_regime_has_no_oracle(self, scenario):
        row = moment_blowup_scan(scenario, [5.0]).rows[0]
        assert row["regime"] == "descriptive"
        assert row["in_bracket"] is None and row["oracle_lo"] is None


@pytest.mark.slow
class TestRefinement:
    """Residual shrinks as the grid is refined"""

    def test_residual_decreases_with_dt(self):
        report = refinement_order(ks=[6, 7, 8], n_paths=2_048, seed=4,
                                  settings=CounterexampleSettings(block_size=256))
        rms = [row["rms_residual"] for row in report.rows]
        assert [row["k"] for row in report.rows] == [6, 7, 8]
        assert rms[0] > rms[-1]
        assert report.order > 0.0

    def test_acceptance_grids_reach_order(self):
        report = refinement_order(ks=[8, 10, 12], n_paths=4_096, seed=4,
                                  settings=CounterexampleSettings(block_size=128))
        assert [row["k"] for row in report.rows] == [8, 10, 12]
        assert report.order >= 0.4
        assert report.passed


@pytest.mark.slow
class TestAcceptanceScenario:
    """k = 10 with 10^5 paths"""

    @pytest.fixture(scope="class")
    def large_scenario(self):
        return build_scenario(k=10, n_paths=100_000, seed=1, settings=CounterexampleSettings(block_size=256))

    def test_nearly_all_paths_stop(self, large_scenario):
        assert large_scenario.stopped_fraction >= 0.99

    def test_solution_checks_pass(self, large_scenario):
        report = verify_solution(large_scenario)
        assert report.passed, report.to_dict()

    def test_lambda_twelve_is_infinite(self, large_scenario):
        row = moment_blowup_scan(large_scenario, [12.0]).rows[0]
        assert row["regime"] == "divergent"
        assert row["verdict"] == Verdict.INFINITE.value

    @pytest.mark.parametrize("n_paths", [200_000, 400_000])
    def test_lambda_twelve_stays_infinite_with_more_paths(self, n_paths):
        scenario = build_scenario(k=10, n_paths=n_paths, seed=1, settings=CounterexampleSettings(block_size=256))
        report = moment_blowup_scan(scenario, [0.0, 1.0, 12.0])
        assert report.rows[-1]["verdict"] == Verdict.INFINITE.value
        assert report.crossover == 12.0
        assert report.passed

"""Tests for operator matrices, spectral radii, complex exponentials and the resolvent identity"""

import numpy as np
import pytest

from components.bmo_analytics import ExponentReport
from components.errors import InvalidExponentError, ShapeMismatchError
from components.filtration_tree import TreeStoppingTime, coin_martingale, random_martingale
from components.montecarlo_paths import TimeGrid, bundled_spec, simulate
from components.spectral_exponent import (
    BUNDLED_SPECTRAL_CASES,
    b_point,
    bound_battery,
    bound_window,
    build_spectral_martingale,
    equivalence_battery,
    exponential_gaps,
    nilpotency_index,
    operator_matrix,
    resolvent_probe,
    spectral_grid,
    spectral_radius_mc,
    spectral_radius_tree,
)
from config.lab_config import SpectralSettings


@pytest.fixture(scope="module")
def coin_operator():
    return operator_matrix(coin_martingale(depth=3), audit_trials=20)


class TestOperatorMatrix:
    """Matrix of the stochastic-integral map"""

    def test_dimension(self, coin_operator):
        assert coin_operator.dimension == 7

    def test_matches_stochastic_integral(self, coin_operator):
        assert coin_operator.audit_gap <= 1e-12

    def test_random_tree_audit(self, random_setup):
        _, m = random_setup
        assert operator_matrix(m, audit_trials=10, seed=1).audit_gap <= 1e-12

    def test_h2_norm_of_identity(self, coin_operator):
        assert coin_operator.h2_norm(np.eye(coin_operator.dimension)) == pytest.approx(1.0)

    def test_vector_martingale_rejected(self, random_setup, rng):
        tree, _ = random_setup
        with pytest.raises(ShapeMismatchError):
            operator_matrix(random_martingale(tree, rng, shape=(2,)))

    def test_nilpotent_within_depth(self, coin_operator):
        index = nilpotency_index(coin_operator)
        assert index is not None and index <= 4


class TestSpectralRadius:
    """Radii on both backends"""

    @pytest.mark.parametrize("p", [2.0, 3.0])
    def test_tree_radius_is_zero(self, coin_operator, p):
        report = spectral_radius_tree(coin_operator, p, SpectralSettings(restarts=2))
        assert report.radius == 0.0
        assert report.method == "nilpotent"

    def test_zero_bracket_paths(self):
        ensemble = simulate(bundled_spec("zero"), TimeGrid(0.0, 1.0, 16), 200, seed=0)
        report = spectral_radius_mc(ensemble, 2.0, n_max=3)
        assert report.radius == 0.0
        assert report.method == "zero-bracket"

    def test_tree_battery(self, coin_operator):
        report = bound_battery(coin_operator, [2.0, 4.0], settings=SpectralSettings(restarts=1))
        assert report.passed
        assert report.b_hat == np.inf


class TestBoundWindow:
    """Radius window from the critical exponent"""

    def test_finite_exponent(self):
        lower, upper = bound_window(np.pi / 2, 2.0)
        assert lower == pytest.approx(2.0 * np.sqrt(2.0) / np.pi)
        assert upper == pytest.approx(2.0 * np.sqrt(12.0) / np.pi)

    def test_infinite_exponent(self):
        assert bound_window(np.inf, 2.0) == (0.0, 0.0)

    def test_rejects_small_p(self):
        with pytest.raises(InvalidExponentError):
            bound_window(1.0, 0.5)

    @pytest.mark.parametrize("lo,hi,expected", [(1.0, 2.0, 1.5), (1.0, np.inf, 1.0), (10.0, np.inf, np.inf)])
    def test_point_value(self, lo, hi, expected):
        assert b_point(ExponentReport("b", lo, hi, 10.0, "mc")) == expected


class TestResolvent:
    """Exponential martingales and the resolvent identity"""

    @pytest.mark.parametrize("lam", [0.5, 0.7 + 0.3j, -1.2j])
    def test_discrete_exponential_is_martingale(self, random_setup, lam):
        _, m = random_setup
        gaps = exponential_gaps(m, lam)
        assert gaps["discrete"] <= 1e-12
        assert gaps["continuous"] > 1e-8

    def test_tree_identity(self, random_setup):
        tree, m = random_setup
        event = np.repeat([True, False, True], tree.n_leaves // 3)
        report = resolvent_probe(m, 0.7 + 0.3j, tau=1, sigma=3, event=event)
        assert report.passed, report.residual
        assert report.event_paths == 2 * tree.n_leaves // 3

    def test_tree_identity_at_stopping_times(self, random_setup):
        tree, m = random_setup
        sigma = TreeStoppingTime.hitting(m.base, lambda v: np.abs(v) > 0.5)
        assert resolvent_probe(m, 0.4, tau=0, sigma=sigma).passed

    def test_event_must_be_known_at_tau(self, random_setup):
        tree, m = random_setup
        event = np.arange(tree.n_leaves) % 2 == 0
        with pytest.raises(ShapeMismatchError):
            resolvent_probe(m, 0.5, tau=1, event=event)

    def test_tau_after_sigma(self, random_setup):
        _, m = random_setup
        with pytest.raises(ShapeMismatchError):
            resolvent_probe(m, 0.5, tau=3, sigma=2)

    def test_brownian_paths(self, brownian_paths):
        report = resolvent_probe(brownian_paths, 0.5 + 0.5j, tau=16, sigma=48)
        assert report.passed, report.residual
        assert report.metadata["exponential"] == "continuous"


class TestCases:
    """Bundled spectral cases"""

    def test_coin_case(self):
        m = build_spectral_martingale(BUNDLED_SPECTRAL_CASES["binary-depth3"])
        assert m.tree.depth == 3 and m.tree.branching == 2

    def test_grid_stops_before_singularity(self):
        grid = spectral_grid(bundled_spec("stopped-time-change"), SpectralSettings())
        assert grid.t_end == pytest.approx(1.0 - 2.0 ** -6)
        assert grid.steps == 504

    @pytest.mark.slow
    def test_equivalence_tree_side(self, stopped_time_change_paths):
        ensemble, spec = stopped_time_change_paths
        report = equivalence_battery(coin_martingale(depth=3), ensemble, spec.stop_rule,
                                     settings=SpectralSettings(audit_trials=10))
        assert report.tree["holds"]
        assert report.mc["b_finite"]

"""Tests for norms, reverse Hölder constants, slicing and exponent bracketing"""

import numpy as np
import pytest

from components.bmo_analytics import (
    DoublingDiagnostic,
    ExponentProbe,
    TailFit,
    bisect_exponent,
    bmo_norm,
    classify_probes,
    epsilon_slice,
    estimate_a,
    estimate_b,
    estimate_exponent_streamed,
    fit_tail,
    joint_slice,
    mc_probe_family,
    norm_hp,
    norm_lp,
    norm_rp,
    reverse_holder_constant,
)
from components.errors import (
    ConfigurationError,
    InvalidExponentError,
    NonPositiveDensityError,
    SliceImpossibleError,
)
from components.filtration_tree import TreeFiltration, TreeMartingale, coin_martingale, random_martingale
from components.montecarlo_paths import TimeGrid, bundled_spec, simulate
from config.lab_config import MonteCarloSettings, Verdict

TOL = 1e-12


def band_probe(lo, hi, name="probe"):
    """Probe with a fixed tail band and a doubling plan too small to ever fire"""
    return ExponentProbe(name, TailFit(0.5 * (lo + hi), 0.1, lo, hi, 100, (0.0, 1.0)),
                         DoublingDiagnostic(np.ones(10)))


class TestTreeNorms:
    """Closed forms on the coin walk"""

    def test_bmo_of_coin_is_root_bracket(self, coin):
        report = bmo_norm(coin)
        assert report.value == pytest.approx(np.sqrt(3.0), abs=TOL)
        assert report.metadata["argmax_node"] == [0, 0]

    @pytest.mark.parametrize("p", [1.0, 2.0, 4.0, np.inf])
    def test_hp_of_deterministic_bracket(self, coin, p):
        assert norm_hp(coin, p).value == pytest.approx(np.sqrt(3.0), abs=TOL)

    def test_rp_infinity_is_largest_excursion(self, coin):
        assert norm_rp(coin, np.inf).value == pytest.approx(3.0)

    def test_rp_dominates_terminal_lp(self, random_setup):
        tree, m = random_setup
        terminal = norm_lp(tree, m.terminal, 2.0).value
        assert norm_rp(m, 2.0).value >= terminal - TOL

    def test_rejects_exponent_below_one(self, coin):
        with pytest.raises(InvalidExponentError):
            norm_rp(coin, 0.5)

    def test_lp_of_vectors_uses_euclidean_norm(self):
        tree = TreeFiltration.uniform(1, 2)
        leaves = np.array([[3.0, 4.0], [0.0, 0.0]])
        assert norm_lp(tree, leaves, 1.0).value == pytest.approx(2.5)


class TestReverseHolder:
    """R_p constants of positive densities"""

    def test_one_step_density(self):
        density = coin_martingale(depth=1, step=0.5).base + 1.0
        report = reverse_holder_constant(density, 2.0)
        assert report.value == pytest.approx(1.25, abs=TOL)
        assert report.metadata["argmax_node"] == [0, 0]

    def test_rejects_non_positive_density(self, coin):
        with pytest.raises(NonPositiveDensityError):
            reverse_holder_constant(coin, 2.0)

    def test_exponential_brownian(self):
        ensemble = simulate(bundled_spec("brownian-exponential"), TimeGrid(0.0, 1.0, 32), 8_000, seed=21)
        report = reverse_holder_constant(ensemble, 2.0)
        assert report.metadata["lower_bound"]
        assert abs(report.value - np.e) < 1.0


class TestSlicing:
    """Greedy epsilon-slicing certificates"""

    def test_coin_slices_one_step_each(self):
        certificate = epsilon_slice(coin_martingale(depth=4, step=0.5), 0.6)
        assert certificate.n_slices == 4
        assert certificate.validate()
        assert np.all(certificate.slice_norms <= 0.6 + TOL)

    def test_single_slice_when_norm_fits(self):
        certificate = epsilon_slice(coin_martingale(depth=4, step=0.5), 1.5)
        assert certificate.n_slices == 1
        assert certificate.validate()

    def test_impossible_step_reports_minimal_eps(self):
        with pytest.raises(SliceImpossibleError) as info:
            epsilon_slice(coin_martingale(depth=2, step=0.5), 0.4)
        assert info.value.minimal_eps == pytest.approx(0.5)

    def test_minimal_eps_covers_later_steps(self):
        tree = TreeFiltration.uniform(2, 2)
        m = TreeMartingale.from_increments(tree, [np.array([[0.3, -0.3]]), np.tile([1.0, -1.0], (2, 1))])
        with pytest.raises(SliceImpossibleError) as info:
            epsilon_slice(m, 0.2)
        assert info.value.node == (0, 0)
        assert info.value.minimal_eps == pytest.approx(1.0)
        assert epsilon_slice(m, info.value.minimal_eps * (1.0 + 1e-9)).validate()

    def test_joint_slice_respects_both_bounds(self):
        m, n = coin_martingale(depth=5, step=0.2), coin_martingale(depth=5, step=0.4)
        certificate = joint_slice([m, n], [0.3, 0.5], names=["M", "N"])
        assert certificate.validate()
        assert np.all(certificate.slice_norms[:, 0] <= 0.3 + TOL)
        assert np.all(certificate.slice_norms[:, 1] <= 0.5 + TOL)
        assert certificate.to_dict()["names"] == ["M", "N"]

    def test_random_martingale_slices_validate(self, rng):
        m = random_martingale(TreeFiltration.uniform(5, 2), rng, 0.05)
        assert epsilon_slice(m, 0.5).validate()


class TestMonteCarloNorms:
    """Path-ensemble norms where closed forms exist"""

    def test_brownian_bmo_is_one(self, brownian_paths):
        report = bmo_norm(brownian_paths)
        assert report.value == pytest.approx(1.0, abs=1e-9)
        assert report.backend == "mc"

    def test_brownian_hp(self, brownian_paths):
        assert norm_hp(brownian_paths, 2.0).value == pytest.approx(1.0, abs=1e-12)

    def test_default_family_covers_every_grid_time(self, brownian_paths):
        probes = mc_probe_family(brownian_paths, "M", MonteCarloSettings())
        grid_times = [at for _, at in probes if isinstance(at, int)]
        assert grid_times == list(range(brownian_paths.grid.steps))
        assert len(probes) - len(grid_times) == MonteCarloSettings().hitting_levels

    def test_thinned_family(self, brownian_paths):
        probes = mc_probe_family(brownian_paths, "M", MonteCarloSettings(probe_times=5, hitting_levels=0))
        assert [at for _, at in probes] == [0, 16, 32, 47, 63]


class TestTailFit:
    """Constant-hazard bands on synthetic samples"""

    def test_exponential_rate_is_bracketed(self, rng):
        fit = fit_tail(rng.exponential(0.5, size=20_000))
        assert fit.kappa_lo <= 2.0 <= fit.kappa_hi
        assert not fit.light_tail

    def test_gaussian_tail_is_light(self, rng):
        assert fit_tail(np.abs(rng.normal(size=20_000))).light_tail

    def test_doubling_fires_on_divergent_moment(self, rng):
        diagnostic = DoublingDiagnostic(rng.exponential(1.0, size=20_000), seed=1)
        assert diagnostic.fires(2.0)
        assert not diagnostic.fires(0.2)


class TestExponentBracketing:
    """Verdict aggregation and bisection"""

    @pytest.mark.parametrize("c,verdict", [(0.5, Verdict.FINITE), (1.5, Verdict.UNDETERMINED),
                                           (3.0, Verdict.INFINITE)])
    def test_single_probe(self, c, verdict):
        assert classify_probes([band_probe(1.0, 2.0)], c) == verdict

    def test_any_infinite_wins(self):
        assert classify_probes([band_probe(5.0, 6.0), band_probe(1.0, 2.0)], 3.0) == Verdict.INFINITE

    def test_bisection_brackets_the_band(self):
        report = bisect_exponent("b", [band_probe(1.0, 2.0)], lambda x: x, cap=10.0, tol=0.01)
        assert 0.99 <= report.lo <= 1.0
        assert 2.0 <= report.hi <= 2.01
        assert report.steps[0]["verdict"] == "infinite"

    def test_certified_finite_at_cap(self):
        report = bisect_exponent("b", [band_probe(50.0, 60.0)], lambda x: x, cap=10.0, tol=0.01)
        assert report.above_cap and report.lo == 10.0

    def test_tree_exponents_are_infinite(self, coin):
        assert estimate_b(coin).above_cap
        assert estimate_a(coin).above_cap

    def test_deterministic_bracket_is_infinite(self, brownian_paths):
        assert estimate_b(brownian_paths).above_cap

    def test_block_wise_matches_full_ensemble(self):
        spec = bundled_spec("stopped-time-change")
        grid = TimeGrid.with_step(0.0, 1.0 - 2.0 ** -4, 2.0 ** -7)
        settings = MonteCarloSettings(block_size=500)
        full = estimate_b(simulate(spec, grid, 2_000, seed=8, settings=settings), stop_rule=spec.stop_rule, seed=8)
        streamed = estimate_exponent_streamed("b", spec, grid, 2_000, seed=8, mc_settings=settings)
        assert (streamed.lo, streamed.hi) == (full.lo, full.hi)

    def test_block_wise_needs_stop_rule(self):
        with pytest.raises(ConfigurationError):
            estimate_exponent_streamed("b", bundled_spec("brownian"), TimeGrid(0.0, 1.0, 16), 100, seed=0)

    @pytest.mark.slow
    def test_stopped_time_change_contains_exit_value(self):
        grid = TimeGrid.with_step(0.0, 1.0 - 2.0 ** -10, 2.0 ** -12)
        report = estimate_exponent_streamed("b", bundled_spec("stopped-time-change"), grid, 200_000, seed=3)
        assert report.lo <= np.pi / 2 <= report.hi, f"[{report.lo:.3f}, {report.hi:.3f}]"
        assert (report.hi - report.lo) / (np.pi / 2) <= 0.10

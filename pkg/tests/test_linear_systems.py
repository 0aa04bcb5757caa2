"""Tests for fundamental solutions, explicit linear equations and Girsanov tilts"""

import numpy as np
import pytest

from components.errors import NonPositiveDensityError, ShapeMismatchError, SingularFactorError
from components.filtration_tree import (
    ProcessKind,
    TreeProcess,
    coin_martingale,
    random_martingale,
    seeded_corpus,
)
from components.linear_systems import (
    BUNDLED_LINEAR_CASES,
    as_matrix_process,
    bmo_data_report,
    build_linear_case,
    check_fundamental_rp,
    continuation_scan,
    equivalent_bsde_spec,
    fundamental,
    girsanov,
    inverse_sde_gap,
    linear_bsde_residual,
    linear_sde_h1_scan,
    rhi_family,
    solve_linear_bsde_explicit,
    solve_linear_sde,
)
from components.se_bsde_solvers import solve_bsde

TOL = 1e-10


@pytest.fixture(params=sorted(BUNDLED_LINEAR_CASES), scope="module")
def case(request):
    return build_linear_case(dict(BUNDLED_LINEAR_CASES[request.param], name=request.param))


def constant_coefficient(tree, value):
    return TreeProcess.constant(tree, value, ProcessKind.PREDICTABLE)


class TestFundamental:
    """Products of one-step factors"""

    def test_identity_and_recursion(self, case):
        fs = fundamental(case.tree, case.M, D=case.A)
        assert fs.identity_gap() <= TOL
        assert fs.recursion_gap() == pytest.approx(0.0, abs=1e-14)

    def test_coin_product(self, coin):
        fs = fundamental(coin.tree, coin, D=constant_coefficient(coin.tree, 0.4))
        assert fs.S.terminal[0, 0, 0] == pytest.approx(1.4 ** 3)
        assert fs.S.terminal[-1, 0, 0] == pytest.approx(0.6 ** 3)

    def test_singular_factor(self):
        m = coin_martingale(depth=2, step=0.5)
        with pytest.raises(SingularFactorError) as info:
            fundamental(m.tree, m, D=constant_coefficient(m.tree, 2.0))
        assert info.value.node == (0, 0)

    def test_inverse_recursion_gap_is_third_order(self, case):
        fine = inverse_sde_gap(fundamental(case.tree, case.M.scaled(0.5), D=case.A))
        coarse = inverse_sde_gap(fundamental(case.tree, case.M, D=case.A))
        assert fine < coarse / 4.0

    def test_scalar_coefficient_for_matrix_system(self, binary_tree):
        with pytest.raises(ShapeMismatchError):
            as_matrix_process(constant_coefficient(binary_tree, 1.0), binary_tree, 2)

    def test_reverse_holder_of_identity(self, binary_tree):
        fs = fundamental(binary_tree, coin_martingale(depth=3))
        assert check_fundamental_rp(fs, 2.0).value == pytest.approx(1.0)

    def test_continuation_scan_is_monotone(self, case):
        table = continuation_scan(fundamental(case.tree, case.M, D=case.A), [1.0, 1.5, 2.0, 3.0])
        assert table["nondecreasing"].all()
        assert (table["constant"] >= 1.0 - TOL).all()


class TestLinearBSDE:
    """Explicit solution against the node recursion and the Picard solver"""

    def test_explicit_solution_satisfies_recursion(self, case):
        Y, Z, M_perp = solve_linear_bsde_explicit(case.A, case.M, case.xi, case.f, case.tree)
        assert linear_bsde_residual(case.A, case.M, case.xi, case.f, Y, Z, M_perp) <= TOL

    def test_agrees_with_picard(self):
        case = build_linear_case(BUNDLED_LINEAR_CASES["scalar-small"])
        Y, _, _ = solve_linear_bsde_explicit(case.A, case.M, case.xi, case.f, case.tree)
        Y2, _, _, report = solve_bsde(equivalent_bsde_spec(case.A, case.M, case.xi, case.f, case.tree))
        assert report.passed, report.error
        gap = max(float(np.max(np.abs(a - b))) for a, b in zip(Y.values, Y2.values))
        assert gap <= 1e-9

    def test_bounded_data_bmo(self):
        case = build_linear_case(BUNDLED_LINEAR_CASES["scalar-small"])
        report = bmo_data_report(case.A, case.M, case.xi)
        assert 0.0 < report["ratio_q"] <= 2.0
        assert np.isfinite(report["bmo_p"])


class TestGirsanov:
    """Discrete exponential tilts"""

    def test_density_reweights_expectations(self, rng):
        case = build_linear_case(BUNDLED_LINEAR_CASES["scalar-small"])
        record = girsanov(case.A, case.M)
        leaves = rng.normal(size=case.tree.n_leaves)
        assert record.expectation_q(leaves) == pytest.approx(
            case.tree.expectation(record.density.terminal * leaves), abs=1e-12)
        assert record.audit_gap <= TOL

    def test_shifted_targets_are_q_martingales(self, rng):
        case = build_linear_case(BUNDLED_LINEAR_CASES["scalar-small"])
        record = girsanov(case.A, case.M, {"V": random_martingale(case.tree, rng)})
        assert set(record.transformed) == {"M", "V"}
        assert record.audit_gap <= TOL

    def test_non_positive_density(self):
        m = coin_martingale(depth=2, step=0.5)
        with pytest.raises(NonPositiveDensityError):
            girsanov(constant_coefficient(m.tree, 4.0), m)

    def test_matrix_integrand_rejected(self):
        case = build_linear_case(BUNDLED_LINEAR_CASES["matrix-small"])
        with pytest.raises(ShapeMismatchError):
            girsanov(case.A, case.M)


class TestLinearSDE:
    """Variation-of-constants solution and reverse Hölder probes"""

    def test_residual(self, case):
        _, report = solve_linear_sde(case.A, case.M, case.V)
        assert report.residual <= TOL
        assert report.hp_norm is not None

    def test_zero_coefficient_returns_forcing(self, random_setup):
        tree, m = random_setup
        X, report = solve_linear_sde(None, m, m.base)
        for x, v in zip(X.values, m.minus_initial().values):
            assert np.allclose(x, v, atol=TOL)
        assert report.left_point_gap <= TOL

    def test_rhi_identity(self, case, rng):
        reports = rhi_family(case.A, case.M, rng, count=6)
        assert all(r.passed for r in reports), [r.identity_gap for r in reports]

    def test_h1_scan(self):
        table = linear_sde_h1_scan(seeded_corpus(4, 3, 2, seed=1), seed=2)
        assert len(table) == 4
        assert (table["residual"] <= TOL).all()
        assert (table["h1"] > 0).all()

"""Tests for contraction budgets and the sliced Picard solvers"""

import numpy as np
import pytest

from components.bmo_analytics import bmo_value
from components.errors import ConfigurationError, UnknownScenarioError
from components.se_bsde_solvers import (
    BUNDLED_SOLVE_SPECS,
    Coefficient,
    budget_bsde,
    budget_se,
    bounded_data_diagnostics,
    build_bsde_spec,
    build_se_spec,
    load_spec_document,
    rho1_formula,
    rho2_formula,
    solve_bsde,
    solve_bsde_bmo,
    solve_se,
    uniqueness_probe,
)

RESIDUAL_TOL = 1e-10


def bundled(name, **overrides):
    return dict(load_spec_document(f"bundled:{name}"), **overrides)


class TestBudgets:
    """Contraction constants"""

    def test_rho1_without_drift(self):
        assert rho1_formula(2.0, 0.3, 0.1, 0.0, 2.0) == pytest.approx(np.sqrt(2.0) * 0.2)

    def test_rho2_with_dominant_eps3(self):
        # C_bar = q(1 + C_p) + C_p = 8 for p = q = 2
        assert rho2_formula(2.0, 0.0, 0.0, 0.2, 0.0, 2.0) == pytest.approx(8.0 * 2.0 * np.sqrt(2.0) * 0.2)

    def test_budget_se_zero_alpha(self):
        spec = build_se_spec(bundled("linear-small", f=[]))
        budget = budget_se(spec, eps1=0.3, eps2=0.1, C_p=2.0)
        assert budget.alpha_bmo == 0.0
        assert budget.rho1 == pytest.approx(0.2828, abs=1e-4)
        assert budget.feasible

    def test_budget_bsde_infeasible(self):
        spec = build_bsde_spec(bundled("linear-small"))
        budget = budget_bsde(spec, 0.3, 0.3, 0.3, C_p=2.0)
        assert not budget.feasible
        assert np.isnan(budget.rho1)


class TestCoefficients:
    """Lipschitz coefficient documents"""

    def test_lipschitz_constant(self):
        coef = Coefficient.from_dicts([{"on": "x", "kind": "sin", "a": -0.2}, {"on": "x", "a": 0.1},
                                       {"on": "xmax", "kind": "tanh", "a": 0.3}], ["x", "xmax"])
        assert coef.lipschitz("x") == pytest.approx(0.3)
        assert coef.lipschitz("xmax") == pytest.approx(0.3)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            Coefficient.from_dicts([{"on": "x", "kind": "exp", "a": 1.0}], ["x"])

    def test_unknown_variable(self):
        with pytest.raises(ConfigurationError):
            Coefficient.from_dicts([{"on": "z", "a": 1.0}], ["y"])

    def test_constant_term(self):
        coef = Coefficient.from_dicts([{"on": "", "kind": "const", "a": 2.0}], ["y"])
        assert np.allclose(coef(0, np.zeros(3)), 2.0)
        assert coef.lipschitz("y") == 0.0


class TestSESolver:
    """Forward equations"""

    @pytest.mark.parametrize("name", ["linear-small", "lipschitz-small"])
    def test_converges_with_small_residual(self, name):
        X, report = solve_se(build_se_spec(bundled(name)))
        assert report.passed, report.error
        assert report.residual <= RESIDUAL_TOL
        assert report.metadata["envelope_ok"]
        assert np.allclose(X.values[0], build_se_spec(bundled(name)).J.values[0])

    def test_zero_coefficients_return_forcing(self):
        spec = build_se_spec(bundled("linear-small", f=[], g=[]))
        X, report = solve_se(spec)
        assert report.passed
        for x, j in zip(X.values, spec.J.values):
            assert np.allclose(x, j, atol=RESIDUAL_TOL)

    def test_iteration_cap_reports_failure(self):
        X, report = solve_se(build_se_spec(bundled("linear-small")), max_iter=1)
        assert X is None
        assert not report.passed
        assert "did not contract" in report.error

    def test_unique_fixed_point(self):
        probe = uniqueness_probe(build_se_spec(bundled("lipschitz-small")))
        assert probe["converged"]
        assert probe["gap"] <= 1e-9


class TestBSDESolver:
    """Backward equations"""

    @pytest.mark.parametrize("name", ["linear-small", "lipschitz-small"])
    def test_converges_with_orthogonal_remainder(self, name):
        Y, Z, M_perp, report = solve_bsde(build_bsde_spec(bundled(name)))
        assert report.passed, report.error
        assert report.residual <= RESIDUAL_TOL
        assert report.metadata["orthogonality"] <= RESIDUAL_TOL
        assert np.allclose(Y.terminal, build_bsde_spec(bundled(name)).xi)

    def test_driverless_bsde_is_conditional_expectation(self):
        spec = build_bsde_spec(bundled("linear-small", bsde_f=[], bsde_g=[]))
        Y, _, _, report = solve_bsde(spec)
        assert report.passed
        expected = spec.tree.expectation(spec.xi + spec.J.terminal) - spec.J.values[0][0]
        assert Y.values[0][0] == pytest.approx(expected, abs=RESIDUAL_TOL)

    def test_unique_fixed_point(self):
        probe = uniqueness_probe(build_bsde_spec(bundled("linear-small")))
        assert probe["converged"]
        assert probe["gap"] <= 1e-9

    def test_bmo_fixed_point(self):
        spec = build_bsde_spec(bundled("bmo-quadratic-free"))
        Y, Z, M_perp, report = solve_bsde_bmo(spec)
        assert report.passed, report.error
        assert report.residual <= RESIDUAL_TOL
        assert report.metadata["metric"] == "bmo"
        diagnostics = bounded_data_diagnostics(Y, Z, M_perp, spec)
        assert diagnostics.passed
        assert diagnostics.y_rinf <= diagnostics.xi_sup + 0.4 * bmo_value(spec.M) ** 2 + RESIDUAL_TOL

    def test_bmo_fixed_point_needs_zero_forcing(self):
        with pytest.raises(ConfigurationError):
            solve_bsde_bmo(build_bsde_spec(bundled("linear-small")))


class TestSpecDocuments:
    """Bundled registry and spec files"""

    def test_bundled_names(self):
        assert load_spec_document("bundled:linear-small")["name"] == "linear-small"
        assert set(BUNDLED_SOLVE_SPECS) == {"linear-small", "lipschitz-small", "bmo-quadratic-free"}

    def test_unknown_bundled(self):
        with pytest.raises(UnknownScenarioError):
            load_spec_document("bundled:cubic")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_spec_document(str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{depth: 3")
        with pytest.raises(ConfigurationError):
            load_spec_document(str(path))

    def test_same_document_same_spec(self):
        a = build_bsde_spec(bundled("linear-small"))
        b = build_bsde_spec(bundled("linear-small"))
        assert np.array_equal(a.xi, b.xi)

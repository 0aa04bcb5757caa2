"""
Sliced Picard Solvers
Contraction budgets, epsilon-sliced Picard iteration for nonlinear SEs and BSDEs, and L-infinity data diagnostics
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from components.bmo_analytics import (
    SliceCertificate,
    bmo_value,
    joint_slice,
    node_conditional,
    norm_hp,
    norm_lp,
    norm_rp,
    subtree_leaves,
)
from components.errors import ConfigurationError, ShapeMismatchError, UnknownScenarioError
from components.filtration_tree import (
    DEGENERATE_VARIANCE,
    ProcessKind,
    TreeFiltration,
    TreeMartingale,
    TreeProcess,
    kw_decompose,
    random_adapted,
    random_martingale,
    random_tree,
    step_covariation,
    stochastic_integral,
)
from config.lab_config import SolverKind, SolverSettings

logger = logging.getLogger(__name__)

_LIPSCHITZ_ONE = {"linear": lambda u: u, "sin": np.sin, "cos": np.cos, "tanh": np.tanh}


@dataclass
class CoefficientTerm:
    on: str
    kind: str = "linear"
    a: float = 0.0


class Coefficient:
    """Sum of a·φ(variable) terms with 1-Lipschitz φ; called as coef(k, *variables)"""

    def __init__(self, terms: Sequence[CoefficientTerm], variables: Sequence[str]):
        self.terms = list(terms)
        self.variables = list(variables)
        for term in self.terms:
            if term.kind != "const" and term.on not in self.variables:
                raise ConfigurationError(f"coefficient term on '{term.on}' but variables are {self.variables}")
            if term.kind != "const" and term.kind not in _LIPSCHITZ_ONE:
                raise ConfigurationError(f"unknown coefficient kind '{term.kind}'")

    def __call__(self, k: int, *args: np.ndarray) -> np.ndarray:
        values = dict(zip(self.variables, args))
        shape_like = args[0]
        out = np.zeros(np.shape(shape_like), dtype=np.result_type(shape_like, float))
        for term in self.terms:
            if term.kind == "const":
                out = out + term.a
                continue
            v = values[term.on]
            if v.ndim < out.ndim:
                v = v.reshape(v.shape + (1,) * (out.ndim - v.ndim))
            out = out + term.a * _LIPSCHITZ_ONE[term.kind](v)
        return out

    def lipschitz(self, variable: str) -> float:
        return float(sum(abs(t.a) for t in self.terms if t.on == variable and t.kind != "const"))

    @classmethod
    def from_dicts(cls, terms: Sequence[Dict[str, Any]], variables: Sequence[str]) -> "Coefficient":
        return cls([CoefficientTerm(**t) for t in terms], variables)

    @classmethod
    def zero(cls, variables: Sequence[str]) -> "Coefficient":
        return cls([], variables)


def constant_envelope(tree: TreeFiltration, value: float) -> TreeProcess:
    return TreeProcess.constant(tree, float(value), ProcessKind.PREDICTABLE)


@dataclass
class SESpec:
    """X = J + ∫ f(X) d<N1,N2> + ∫ g(X) dM; f, g called as (k, x_k, x*_k) with envelopes alpha, beta"""
    tree: TreeFiltration
    J: TreeProcess
    f: Callable[..., np.ndarray]
    g: Callable[..., np.ndarray]
    alpha: TreeProcess
    beta: TreeProcess
    N1: TreeMartingale
    N2: TreeMartingale
    M: TreeMartingale
    p: float = 2.0
    name: str = "se"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.J.shape


@dataclass
class BSDESpec:
    """Y = ξ + (J_T - J) + ∫ f(Y) d<N1,N2> + ∫ g(Y,Z) d<M> - ∫ Z dM - M^⊥"""
    tree: TreeFiltration
    xi: np.ndarray
    J: TreeProcess
    f: Callable[..., np.ndarray]
    g: Callable[..., np.ndarray]
    alpha: TreeProcess
    beta: TreeProcess
    gamma: TreeProcess
    N1: TreeMartingale
    N2: TreeMartingale
    M: TreeMartingale
    p: float = 2.0
    name: str = "bsde"

    @property
    def shape(self) -> Tuple[int, ...]:
        return np.shape(self.xi)[1:]


def envelope_audit(spec, rng: np.random.Generator, trials: int = 8, tol: float = 1e-12) -> Tuple[bool, float]:
    """Spot-check the Lipschitz envelopes on random pairs; returns (ok, worst excess)"""
    tree = spec.tree
    worst = -np.inf
    for _ in range(trials):
        x1 = random_adapted(tree, rng, -2.0, 2.0, spec.shape)
        x2 = random_adapted(tree, rng, -2.0, 2.0, spec.shape)
        m1, m2 = x1.running_max(), x2.running_max()
        gap = (x1 - x2).running_max()
        for k in range(tree.depth):
            if isinstance(spec, SESpec):
                checks = [(spec.f(k, x1.values[k], m1.values[k]) - spec.f(k, x2.values[k], m2.values[k]),
                           spec.alpha.values[k] * gap.values[k])]
                checks.append((spec.g(k, x1.values[k], m1.values[k]) - spec.g(k, x2.values[k], m2.values[k]),
                               spec.beta.values[k] * gap.values[k]))
            else:
                z = rng.uniform(-2.0, 2.0, size=x1.values[k].shape)
                z2 = rng.uniform(-2.0, 2.0, size=x1.values[k].shape)
                zgap = _norm_entries(z - z2)
                checks = [(spec.f(k, x1.values[k]) - spec.f(k, x2.values[k]), spec.alpha.values[k] * gap.values[k]),
                          (spec.g(k, x1.values[k], z) - spec.g(k, x2.values[k], z2),
                           spec.beta.values[k] * gap.values[k] + spec.gamma.values[k] * zgap)]
            for diff, bound in checks:
                worst = max(worst, float(np.max(_norm_entries(diff) - bound)))
    return worst <= tol, worst


def _norm_entries(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim <= 1:
        return np.abs(values)
    return np.linalg.norm(values.reshape(values.shape[0], -1), axis=1)


# ---------------------------------------------------------------------------
# Contraction budgets
# ---------------------------------------------------------------------------

@dataclass
class ContractionBudget:
    kind: str
    p: float
    eps1: float
    eps2: float
    eps3: float
    C_p: float
    alpha_bmo: float
    q: float
    C_bar: float
    rho: float
    feasible: bool

    @property
    def rho1(self) -> float:
        return self.rho if self.kind == SolverKind.SE.value else np.nan

    @property
    def rho2(self) -> float:
        return self.rho if self.kind == SolverKind.BSDE.value else np.nan

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def rho1_formula(p: float, eps1: float, eps2: float, alpha_bmo: float, C_p: float) -> float:
    return 2.0 * p * eps1 * alpha_bmo + np.sqrt(2.0) * eps2 * C_p


def rho2_formula(p: float, eps1: float, eps2: float, eps3: float, alpha_bmo: float, C_p: float) -> float:
    q = _conjugate(p)
    c_bar = q * (1.0 + C_p) + C_p
    return c_bar * max(np.sqrt(2.0) * p * eps3, 2.0 * p * alpha_bmo * eps1 + 2.0 * p * eps2 ** 2)


def _conjugate(p: float) -> float:
    return np.inf if p == 1.0 else p / (p - 1.0)


def _alpha_bmo(spec) -> float:
    return bmo_value(stochastic_integral(spec.alpha, spec.N1))


def budget_se(spec: SESpec, eps1: float, eps2: float, C_p: float = 2.0) -> ContractionBudget:
    alpha_bmo = _alpha_bmo(spec)
    rho = rho1_formula(spec.p, eps1, eps2, alpha_bmo, C_p)
    q = _conjugate(spec.p)
    return ContractionBudget(SolverKind.SE.value, spec.p, eps1, eps2, 0.0, C_p, alpha_bmo, q,
                             q * (1.0 + C_p) + C_p, rho, bool(rho < 1.0))


def budget_bsde(spec: BSDESpec, eps1: float, eps2: float, eps3: float, C_p: float = 2.0) -> ContractionBudget:
    alpha_bmo = _alpha_bmo(spec)
    rho = rho2_formula(spec.p, eps1, eps2, eps3, alpha_bmo, C_p)
    q = _conjugate(spec.p)
    return ContractionBudget(SolverKind.BSDE.value, spec.p, eps1, eps2, eps3, C_p, alpha_bmo, q,
                             q * (1.0 + C_p) + C_p, rho, bool(rho < 1.0))


def budget_bsde_bmo(spec: BSDESpec, eps: float) -> ContractionBudget:
    rho = float(np.sqrt(2.0) * eps)
    return ContractionBudget(SolverKind.BSDE_BMO.value, spec.p, 0.0, 0.0, eps, 0.0, 0.0, 0.0, 0.0,
                             rho, bool(rho < 1.0))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SolveReport:
    kind: str
    converged: bool
    tol: float
    n_slices: int = 0
    iterations: List[List[float]] = field(default_factory=list)
    ratios: List[List[float]] = field(default_factory=list)
    residual: float = np.nan
    a_priori: float = np.nan
    budget: Dict[str, Any] = field(default_factory=dict)
    certificate: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def max_ratio(self) -> float:
        flat = [r for slice_ratios in self.ratios for r in slice_ratios]
        return float(max(flat)) if flat else 0.0

    @property
    def passed(self) -> bool:
        return self.converged and self.error is None

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "converged": self.converged, "passed": self.passed, "tol": self.tol,
                "n_slices": self.n_slices, "iterations": self.iterations, "ratios": self.ratios,
                "max_ratio": self.max_ratio, "residual": self.residual, "a_priori": self.a_priori,
                "budget": self.budget, "certificate": self.certificate, "metadata": self.metadata,
                "error": self.error}


def slice_drivers(tree: TreeFiltration,
                  parts: Sequence[Tuple[TreeMartingale, float, str, bool]]) -> SliceCertificate:
    """Jointly slice the driving martingales that move and whose coefficient is live"""
    live = [(m, eps, name) for m, eps, name, needed in parts
            if needed and any(np.any(np.real(v) > 0) for v in m.step_bracket.values)]
    if not live:
        return joint_slice([TreeMartingale.zero(tree)], [1.0], ["none"])
    return joint_slice([m for m, _, _ in live], [eps for _, eps, _ in live], [name for _, _, name in live])


def _col(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape per-node scalars so they broadcast against per-node entries"""
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def _ratios(distances: List[float]) -> List[float]:
    return [distances[j + 1] / distances[j] for j in range(len(distances) - 1) if distances[j] > 0]


# ---------------------------------------------------------------------------
# Forward SE
# ---------------------------------------------------------------------------

class SESolver:
    """Picard iteration of I(X) = J + ∫ f(X) d<N1,N2> + ∫ g(X) dM, slice by slice forward in time"""

    def __init__(self, spec: SESpec, settings: Optional[SolverSettings] = None):
        self.spec = spec
        self.settings = settings or SolverSettings()
        self.logger = logging.getLogger(__name__)
        tree = spec.tree
        self.dcov = [np.real(v) for v in step_covariation(spec.N1, spec.N2).values]
        self.dM = spec.M.increments
        self.dJ = [spec.J.values[k + 1] - tree.expand(spec.J.values[k]) for k in range(tree.depth)]

    def _step(self, k: int, x: np.ndarray, xmax: np.ndarray) -> np.ndarray:
        """Per-child increment ΔJ + f dcov + g dM out of level k"""
        tree = self.spec.tree
        f = self.spec.f(k, x, xmax)
        g = self.spec.g(k, x, xmax)
        drift = tree.expand(f * _col(self.dcov[k], f))
        dm = self.dM[k].reshape(-1)
        return self.dJ[k] + drift + tree.expand(g) * _col(dm, g)

    def sweep(self, X: TreeProcess, certificate: SliceCertificate, i: int) -> TreeProcess:
        tree = self.spec.tree
        xmax = X.running_max()
        new = [self.spec.J.values[0].astype(np.result_type(self.spec.J.values[0], float))]
        for k in range(tree.depth):
            idx = tree.expand(certificate.slice_index[k])
            parent = tree.expand(new[k])
            candidate = parent + self._step(k, X.values[k], xmax.values[k])
            child = np.where(_col(idx < i, parent), X.values[k + 1],
                             np.where(_col(idx == i, parent), candidate, parent))
            new.append(child)
        return TreeProcess(tree, tuple(new))

    def residual(self, X: TreeProcess) -> float:
        tree = self.spec.tree
        xmax = X.running_max()
        worst = float(np.max(np.abs(X.values[0] - self.spec.J.values[0])))
        for k in range(tree.depth):
            expected = tree.expand(X.values[k]) + self._step(k, X.values[k], xmax.values[k])
            worst = max(worst, float(np.max(np.abs(X.values[k + 1] - expected))))
        return worst

    def solve(self, budget: Optional[ContractionBudget] = None, tol: Optional[float] = None,
              max_iter: Optional[int] = None, initial: str = "zero") -> Tuple[Optional[TreeProcess], SolveReport]:
        spec, settings = self.spec, self.settings
        tol = settings.tol if tol is None else tol
        max_iter = settings.max_iter if max_iter is None else max_iter
        budget = budget or budget_se(spec, settings.eps1, settings.eps2, settings.bdg_constant)
        if not budget.feasible:
            self.logger.warning(f"{spec.name}: rho1 = {budget.rho:.4f} >= 1; solving anyway")
        certificate = slice_drivers(spec.tree, [
            (spec.N2, budget.eps1, "N2", budget.alpha_bmo > 0),
            (stochastic_integral(spec.beta, spec.M), budget.eps2, "beta.M", True),
        ])
        X = spec.J if initial == "forcing" else TreeProcess.constant(spec.tree, np.zeros(spec.shape))
        report = SolveReport(SolverKind.SE.value, True, tol, certificate.n_slices, budget=budget.to_dict(),
                             certificate=certificate.to_dict(), metadata={"initial": initial, "name": spec.name})
        for i in range(certificate.n_slices):
            distances: List[float] = []
            for _ in range(max_iter):
                new = self.sweep(X, certificate, i)
                distances.append(norm_rp(new - X, spec.p).value)
                X = new
                self.logger.debug(f"slice {i}: iterate distance {distances[-1]:.3e}")
                if distances[-1] <= tol:
                    break
            report.iterations.append(distances)
            report.ratios.append(_ratios(distances))
            if distances[-1] > tol:
                report.converged = False
                report.error = f"slice {i} did not contract within {max_iter} iterations"
                self.logger.warning(f"{spec.name}: {report.error}")
                return None, report
        report.residual = self.residual(X)
        j_norm = norm_rp(spec.J, spec.p).value
        report.a_priori = norm_rp(X, spec.p).value / j_norm if j_norm > 0 else np.nan
        self.logger.info(f"{spec.name}: SE converged over {certificate.n_slices} slices, residual {report.residual:.2e}")
        return X, report


def solve_se(spec: SESpec, budget: Optional[ContractionBudget] = None, tol: Optional[float] = None,
             max_iter: Optional[int] = None, initial: str = "zero",
             settings: Optional[SolverSettings] = None) -> Tuple[Optional[TreeProcess], SolveReport]:
    X, report = SESolver(spec, settings).solve(budget, tol, max_iter, initial)
    report.metadata["envelope_ok"], report.metadata["envelope_excess"] = envelope_audit(spec, np.random.default_rng(0))
    if not report.metadata["envelope_ok"]:
        logger.warning(f"{spec.name}: coefficients exceed their Lipschitz envelopes")
    return X, report


# ---------------------------------------------------------------------------
# Backward SDE
# ---------------------------------------------------------------------------

@dataclass
class BSDESolution:
    Y: TreeProcess
    Z: TreeProcess
    M_perp: TreeMartingale
    martingale_part: TreeMartingale


class BSDESolver:
    """Picard iteration for the discrete BSDE, backward over slices.

    Each sweep recomputes Y on the slice by exact conditioning, with the drivers
    evaluated at the previous iterate, and reads Z off the martingale part.
    """

    def __init__(self, spec: BSDESpec, settings: Optional[SolverSettings] = None):
        self.spec = spec
        self.settings = settings or SolverSettings()
        self.logger = logging.getLogger(__name__)
        if spec.M.shape != ():
            raise ShapeMismatchError("the BSDE driver M must be scalar")
        if np.shape(spec.xi)[0] != spec.tree.n_leaves:
            raise ShapeMismatchError("terminal value must hold one entry per leaf")
        self.dcov = [np.real(v) for v in step_covariation(spec.N1, spec.N2).values]
        self.dbr = spec.M.step_bracket.values
        self.dM = spec.M.increments

    def _z(self, k: int, w: np.ndarray) -> np.ndarray:
        tree = self.spec.tree
        var = self.dbr[k]
        grouped = w.reshape((tree.level_size(k), tree.branching) + w.shape[1:])
        cov = np.einsum("jb,jb...->j...", tree.probabilities[k] * self.dM[k], grouped)
        ok = _col(var > DEGENERATE_VARIANCE, cov)
        return np.where(ok, cov / _col(np.where(var > DEGENERATE_VARIANCE, var, 1.0), cov), 0.0)

    def _driver(self, k: int, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        f = self.spec.f(k, y)
        g = self.spec.g(k, y, z)
        return f * _col(self.dcov[k], f) + g * _col(self.dbr[k], g)

    def sweep(self, Y: TreeProcess, Z: TreeProcess, certificate: SliceCertificate,
              i: int) -> Tuple[TreeProcess, TreeProcess]:
        spec, tree = self.spec, self.spec.tree
        J = spec.J.values
        new_y = list(Y.values)
        new_z = list(Z.values)
        for k in range(tree.depth - 1, -1, -1):
            mask = certificate.slice_index[k] == i
            if not np.any(mask):
                continue
            w = new_y[k + 1] + J[k + 1]
            candidate = tree.average(w, k) - J[k] + self._driver(k, Y.values[k], Z.values[k])
            new_y[k] = np.where(_col(mask, candidate), candidate, Y.values[k])
            z = self._z(k, w)
            new_z[k] = np.where(_col(mask, z), z, Z.values[k])
        return TreeProcess(tree, tuple(new_y)), TreeProcess(tree, tuple(new_z), ProcessKind.PREDICTABLE)

    def assemble(self, Y: TreeProcess) -> BSDESolution:
        """Split the martingale part of Y + J into Z∘M + M^⊥ by exact projection"""
        spec, tree = self.spec, self.spec.tree
        W = Y + spec.J
        increments = []
        for k in range(tree.depth):
            expected = tree.average(W.values[k + 1], k)
            increments.append((W.values[k + 1] - tree.expand(expected)).reshape(
                (tree.level_size(k), tree.branching) + spec.shape))
        part = TreeMartingale.from_increments(tree, increments, np.zeros(spec.shape))
        decomposition = kw_decompose(part, spec.M)
        if decomposition.degenerate_nodes:
            self.logger.warning(f"{len(decomposition.degenerate_nodes)} nodes where M does not move; Z set to 0")
        return BSDESolution(Y, decomposition.z, decomposition.n_perp, part)

    def residual(self, solution: BSDESolution) -> float:
        """Node-wise residual of Y_k = Y_{k+1} + ΔJ + f Δ<N1,N2> + g Δ<M> - Z ΔM - ΔM^⊥"""
        spec, tree = self.spec, self.spec.tree
        Y, Z = solution.Y, solution.Z
        J = spec.J.values
        worst = float(np.max(_norm_entries(Y.values[-1] - spec.xi)))
        for k in range(tree.depth):
            drive = self._driver(k, Y.values[k], Z.values[k])
            dperp = solution.M_perp.increments[k].reshape((-1,) + spec.shape)
            zdm = tree.expand(Z.values[k]) * _col(self.dM[k].reshape(-1), tree.expand(Z.values[k]))
            rhs = Y.values[k + 1] + (J[k + 1] - tree.expand(J[k])) + tree.expand(drive) - zdm - dperp
            worst = max(worst, float(np.max(_norm_entries(tree.expand(Y.values[k]) - rhs))))
        return worst

    def _initial(self, initial: str) -> Tuple[TreeProcess, TreeProcess]:
        spec, tree = self.spec, self.spec.tree
        if initial == "forcing":
            base = spec.J
        else:
            base = TreeProcess.constant(tree, np.zeros(spec.shape))
        values = list(base.values)
        values[-1] = np.asarray(spec.xi, dtype=np.result_type(spec.xi, float))
        Z = TreeProcess.constant(tree, np.zeros(spec.shape), ProcessKind.PREDICTABLE)
        return TreeProcess(tree, tuple(values)), Z

    def _distance(self, old_y, old_z, new_y, new_z, metric: str) -> float:
        dz = stochastic_integral(new_z - old_z, self.spec.M)
        if metric == "bmo":
            return bmo_value(dz)
        return norm_rp(new_y - old_y, self.spec.p).value + norm_hp(dz, self.spec.p).value

    def solve(self, certificate: SliceCertificate, budget: ContractionBudget, tol: float, max_iter: int,
              kind: SolverKind, metric: str, initial: str = "zero") -> Tuple[Optional[BSDESolution], SolveReport]:
        spec = self.spec
        Y, Z = self._initial(initial)
        report = SolveReport(kind.value, True, tol, certificate.n_slices, budget=budget.to_dict(),
                             certificate=certificate.to_dict(),
                             metadata={"initial": initial, "metric": metric, "name": spec.name})
        for i in range(certificate.n_slices - 1, -1, -1):
            distances: List[float] = []
            for _ in range(max_iter):
                new_y, new_z = self.sweep(Y, Z, certificate, i)
                distances.append(self._distance(Y, Z, new_y, new_z, metric))
                Y, Z = new_y, new_z
                self.logger.debug(f"slice {i}: iterate distance {distances[-1]:.3e}")
                if distances[-1] <= tol:
                    break
            report.iterations.insert(0, distances)
            report.ratios.insert(0, _ratios(distances))
            if distances[-1] > tol:
                report.converged = False
                report.error = f"slice {i} did not contract within {max_iter} iterations"
                self.logger.warning(f"{spec.name}: {report.error}")
                return None, report
        solution = self.assemble(Y)
        report.residual = self.residual(solution)
        data = norm_lp(spec.tree, spec.xi, spec.p).value + norm_rp(spec.J, spec.p).value
        size = norm_rp(Y, spec.p).value + norm_hp(solution.martingale_part, spec.p).value
        report.a_priori = size / data if data > 0 else np.nan
        report.metadata["orthogonality"] = float(max(
            np.max(np.abs(v)) for v in step_covariation(spec.M, solution.M_perp).values))
        self.logger.info(f"{spec.name}: {kind.value} converged over {certificate.n_slices} slices, "
                         f"residual {report.residual:.2e}")
        return solution, report


def solve_bsde(spec: BSDESpec, budget: Optional[ContractionBudget] = None, tol: Optional[float] = None,
               max_iter: Optional[int] = None, initial: str = "zero",
               settings: Optional[SolverSettings] = None) -> Tuple[Optional[TreeProcess], Optional[TreeProcess],
                                                                   Optional[TreeMartingale], SolveReport]:
    settings = settings or SolverSettings()
    tol = settings.tol if tol is None else tol
    max_iter = settings.max_iter if max_iter is None else max_iter
    budget = budget or budget_bsde(spec, settings.eps1, settings.eps2, settings.eps3, settings.bdg_constant)
    if not budget.feasible:
        logger.warning(f"{spec.name}: rho2 = {budget.rho:.4f} >= 1; solving anyway")
    sqrt_beta = spec.beta.map(lambda v: np.sqrt(np.abs(v)))
    certificate = slice_drivers(spec.tree, [
        (spec.N2, budget.eps1, "N2", budget.alpha_bmo > 0),
        (stochastic_integral(sqrt_beta, spec.M), budget.eps2, "sqrt(beta).M", True),
        (stochastic_integral(spec.gamma, spec.M), budget.eps3, "gamma.M", True),
    ])
    solution, report = BSDESolver(spec, settings).solve(certificate, budget, tol, max_iter,
                                                        SolverKind.BSDE, "rp", initial)
    report.metadata["envelope_ok"], report.metadata["envelope_excess"] = envelope_audit(spec, np.random.default_rng(0))
    if not report.metadata["envelope_ok"]:
        logger.warning(f"{spec.name}: coefficients exceed their Lipschitz envelopes")
    if solution is None:
        return None, None, None, report
    return solution.Y, solution.Z, solution.M_perp, report


def solve_bsde_bmo(spec: BSDESpec, eps: Optional[float] = None, tol: Optional[float] = None,
                   max_iter: Optional[int] = None,
                   settings: Optional[SolverSettings] = None) -> Tuple[Optional[TreeProcess], Optional[TreeProcess],
                                                                       Optional[TreeMartingale], SolveReport]:
    """Fixed point in the BMO norm of z∘M for Y = ξ + ∫ g(Z) d<M> - ∫ Z dM - M^⊥"""
    settings = settings or SolverSettings()
    eps = settings.eps3 if eps is None else eps
    tol = settings.tol if tol is None else tol
    max_iter = settings.max_iter if max_iter is None else max_iter
    if any(np.any(v != 0) for v in spec.J.values):
        raise ConfigurationError("the BMO fixed point needs J = 0")
    if any(np.any(v != 0) for v in spec.beta.values) or any(np.any(v != 0) for v in spec.alpha.values):
        raise ConfigurationError("the BMO fixed point needs f = 0 and g independent of y (zero alpha and beta)")
    budget = budget_bsde_bmo(spec, eps)
    certificate = slice_drivers(spec.tree, [(stochastic_integral(spec.gamma, spec.M), eps, "gamma.M", True)])
    solution, report = BSDESolver(spec, settings).solve(certificate, budget, tol, max_iter,
                                                        SolverKind.BSDE_BMO, "bmo")
    if solution is None:
        return None, None, None, report
    report.metadata["bmo_ratio_bound"] = float(np.sqrt(2.0) * np.max(certificate.slice_norms))
    return solution.Y, solution.Z, solution.M_perp, report


# ---------------------------------------------------------------------------
# Bounded data
# ---------------------------------------------------------------------------

@dataclass
class BoundedDataReport:
    y_rinf: float
    u_bmo: float
    xi_sup: float
    j_rinf: float
    lambda_moments: Dict[str, float]
    bracket_moments: Dict[str, float]
    john_nirenberg: Dict[str, Optional[float]]
    passed: bool
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def conditional_exponential_sup(u: TreeMartingale, lam: float) -> float:
    """sup over nodes v of E[exp(lam |U_T - U_v|) | v]"""
    tree = u.tree
    leaves = u.terminal
    best = 1.0
    for k in range(tree.depth + 1):
        diff = _norm_entries(leaves - subtree_leaves(tree, k, u.values[k]))
        best = max(best, float(np.max(node_conditional(tree, k, np.exp(lam * diff)))))
    return best


def conditional_bracket_moment_sup(u: TreeMartingale, eps: float) -> float:
    """sup over nodes v of E[exp(eps (<U>_T - <U>_v)) | v]"""
    tree = u.tree
    bracket = u.bracket
    best = 1.0
    for k in range(tree.depth + 1):
        remaining = bracket.terminal - subtree_leaves(tree, k, bracket.values[k])
        best = max(best, float(np.max(node_conditional(tree, k, np.exp(eps * remaining)))))
    return best


def bounded_data_diagnostics(Y: TreeProcess, Z: TreeProcess, M_perp: TreeMartingale, spec: BSDESpec,
                             lambdas: Sequence[float] = (0.25, 0.5, 1.0, 2.0),
                             eps_grid: Sequence[float] = (0.01, 0.05, 0.1)) -> BoundedDataReport:
    """Sup norms of the solution and exponential moments of U = Z∘M + M^⊥ against John-Nirenberg"""
    U = stochastic_integral(Z, spec.M) + M_perp
    u_bmo = bmo_value(U)
    lam_moments = {f"{lam:g}": conditional_exponential_sup(U, lam) for lam in lambdas}
    bracket_moments, bounds = {}, {}
    passed = True
    for eps in eps_grid:
        measured = conditional_bracket_moment_sup(U, eps)
        bracket_moments[f"{eps:g}"] = measured
        if 8.0 * eps * u_bmo ** 2 < 1.0:
            bound = 1.0 / (1.0 - 8.0 * eps * u_bmo ** 2)
            bounds[f"{eps:g}"] = bound
            passed &= measured <= bound * (1.0 + 1e-12)
        else:
            bounds[f"{eps:g}"] = None
    return BoundedDataReport(
        y_rinf=norm_rp(Y, np.inf).value,
        u_bmo=u_bmo,
        xi_sup=float(np.max(_norm_entries(spec.xi))),
        j_rinf=norm_rp(spec.J, np.inf).value,
        lambda_moments=lam_moments,
        bracket_moments=bracket_moments,
        john_nirenberg=bounds,
        passed=bool(passed),
        error=None if passed else "measured exponential moment above the John-Nirenberg bound",
    )


# ---------------------------------------------------------------------------
# Spec documents
# ---------------------------------------------------------------------------

BUNDLED_SOLVE_SPECS: Dict[str, Dict[str, Any]] = {
    "linear-small": {
        "depth": 4, "branching": 3, "generator": "random", "seed": 11, "scale": 0.3, "forcing": 0.5,
        "f": [{"on": "x", "kind": "linear", "a": 0.1}],
        "g": [{"on": "x", "kind": "linear", "a": 0.2}],
        "bsde_f": [{"on": "y", "kind": "linear", "a": 0.1}],
        "bsde_g": [{"on": "z", "kind": "linear", "a": 0.2}],
    },
    "lipschitz-small": {
        "depth": 4, "branching": 3, "generator": "random", "seed": 23, "scale": 0.3, "forcing": 0.5,
        "f": [{"on": "x", "kind": "sin", "a": 0.2}, {"on": "xmax", "kind": "linear", "a": 0.05}],
        "g": [{"on": "x", "kind": "tanh", "a": 0.3}],
        "bsde_f": [{"on": "y", "kind": "cos", "a": 0.2}],
        "bsde_g": [{"on": "y", "kind": "sin", "a": 0.1}, {"on": "z", "kind": "tanh", "a": 0.3}],
    },
    "bmo-quadratic-free": {
        "depth": 4, "branching": 3, "generator": "random", "seed": 5, "scale": 0.3, "forcing": 0.0,
        "f": [], "g": [],
        "bsde_f": [],
        "bsde_g": [{"on": "z", "kind": "tanh", "a": 0.4}],
    },
}


def load_spec_document(spec: str, bundled: Optional[Dict[str, Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Read "bundled:<name>" from a registry or a JSON spec file"""
    bundled = BUNDLED_SOLVE_SPECS if bundled is None else bundled
    if spec.startswith("bundled:"):
        name = spec.split(":", 1)[1]
        if name not in bundled:
            raise UnknownScenarioError(name, list(bundled))
        return dict(bundled[name], name=name)
    path = Path(spec)
    if not path.exists():
        raise ConfigurationError(f"spec file '{spec}' not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"spec file '{spec}' is not valid JSON: {e}")


def _drivers(doc: Dict[str, Any]) -> Tuple[TreeFiltration, TreeMartingale, np.random.Generator]:
    rng = np.random.default_rng(np.random.SeedSequence(int(doc.get("seed", 0))))
    tree = random_tree(rng, int(doc["depth"]), int(doc["branching"]), doc.get("generator", "random"))
    M = random_martingale(tree, rng, float(doc.get("scale", 0.3)))
    return tree, M, rng


def build_se_spec(doc: Dict[str, Any]) -> SESpec:
    """Build an SE from a spec document; N1 = N2 = M unless 'independent_n' is set"""
    tree, M, rng = _drivers(doc)
    N = random_martingale(tree, rng, float(doc.get("scale", 0.3))) if doc.get("independent_n") else M
    J = random_adapted(tree, rng, -1.0, 1.0).map(lambda v: v * float(doc.get("forcing", 0.5)))
    f = Coefficient.from_dicts(doc.get("f", []), ["x", "xmax"])
    g = Coefficient.from_dicts(doc.get("g", []), ["x", "xmax"])
    alpha = constant_envelope(tree, f.lipschitz("x") + f.lipschitz("xmax"))
    beta = constant_envelope(tree, g.lipschitz("x") + g.lipschitz("xmax"))
    return SESpec(tree, J, f, g, alpha, beta, N, N, M, float(doc.get("p", 2.0)), doc.get("name", "se"))


def build_bsde_spec(doc: Dict[str, Any]) -> BSDESpec:
    tree, M, rng = _drivers(doc)
    N = random_martingale(tree, rng, float(doc.get("scale", 0.3))) if doc.get("independent_n") else M
    xi = rng.uniform(-1.0, 1.0, size=tree.n_leaves)
    forcing = float(doc.get("forcing", 0.5))
    J = random_adapted(tree, rng, -1.0, 1.0).map(lambda v: v * forcing)
    f = Coefficient.from_dicts(doc.get("bsde_f", []), ["y"])
    g = Coefficient.from_dicts(doc.get("bsde_g", []), ["y", "z"])
    return BSDESpec(tree, xi, J, f, g, constant_envelope(tree, f.lipschitz("y")),
                    constant_envelope(tree, g.lipschitz("y")), constant_envelope(tree, g.lipschitz("z")),
                    N, N, M, float(doc.get("p", 2.0)), doc.get("name", "bsde"))


def uniqueness_probe(spec, settings: Optional[SolverSettings] = None) -> Dict[str, Any]:
    """Solve from the zero and the forcing starting points; the fixed points must coincide"""
    if isinstance(spec, SESpec):
        first, r1 = solve_se(spec, initial="zero", settings=settings)
        second, r2 = solve_se(spec, initial="forcing", settings=settings)
    else:
        first, _, _, r1 = solve_bsde(spec, initial="zero", settings=settings)
        second, _, _, r2 = solve_bsde(spec, initial="forcing", settings=settings)
    if first is None or second is None:
        return {"converged": False, "gap": np.nan}
    return {"converged": True, "gap": norm_rp(first - second, np.inf).value,
            "iterations": [sum(len(d) for d in r1.iterations), sum(len(d) for d in r2.iterations)]}

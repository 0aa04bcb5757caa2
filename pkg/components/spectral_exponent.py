"""
Spectral Exponent
Stochastic-integral operator matrices, spectral radii on trees and paths, complex exponentials and the resolvent identity
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from components.bmo_analytics import (
    ExponentReport,
    build_probes,
    classify_probes,
    estimate_b,
    node_conditional,
    norm_hp,
    stop_info,
)
from components.errors import InvalidExponentError, ShapeMismatchError
from components.filtration_tree import (
    TreeFiltration,
    TreeMartingale,
    TreeStoppingTime,
    coin_martingale,
    random_martingale,
    random_tree,
    stochastic_integral,
)
from components.montecarlo_paths import (
    BarrierRule,
    GridStoppingTime,
    MartingaleSpec,
    PathEnsemble,
    TimeGrid,
    bin_estimates,
    bundled_spec,
    integrate_paths,
    simulate,
)
from config.lab_config import Backend, ExponentSettings, MonteCarloSettings, SpectralSettings, Verdict

logger = logging.getLogger(__name__)

NILPOTENT_TOL = 1e-12
VANISHING_FACTOR = 1e-14
RESOLVENT_MC_BAND = 5.0   # MC residual band in units of sqrt(dt)·max(1, |λ|)²

StopArg = Union[None, int, TreeStoppingTime, GridStoppingTime]


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1.0:
        raise InvalidExponentError(f"exponent p must lie in [1, inf], got {p}")
    return p


def centred_bases(tree: TreeFiltration) -> Tuple[np.ndarray, ...]:
    """Per level k, (B**k, B, B-1) orthonormal bases of child increments with zero conditional mean"""
    return tuple(np.stack([linalg.null_space(row[None, :]) for row in tree.probabilities[k]])
                 for k in range(tree.depth))


@dataclass
class OperatorMatrix:
    """Matrix of X -> X∘M on zero-initial martingales.

    Coordinates run level by level and node by node, B-1 per node, in the
    centred-increment bases. Column i holds the image of basis martingale i.
    """
    M: TreeMartingale
    matrix: np.ndarray
    bases: Tuple[np.ndarray, ...]
    offsets: Tuple[int, ...]
    audit_gap: float = 0.0

    @property
    def tree(self) -> TreeFiltration:
        return self.M.tree

    @property
    def dimension(self) -> int:
        return int(self.offsets[-1])

    def _columns(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords)
        if coords.shape[0] != self.dimension:
            raise ShapeMismatchError(f"coordinates have {coords.shape[0]} rows, operator dimension is {self.dimension}")
        return coords.reshape(self.dimension, -1)

    def increments(self, coords: np.ndarray) -> List[np.ndarray]:
        """Per level, (B**k, B, columns) increments of the martingales with these coordinates"""
        cols = self._columns(coords)
        tree = self.tree
        out = []
        for k, basis in enumerate(self.bases):
            block = cols[self.offsets[k]:self.offsets[k + 1]].reshape(tree.level_size(k), tree.branching - 1, -1)
            out.append(np.einsum("jba,jac->jbc", basis, block))
        return out

    def coordinates_of(self, increments: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.einsum("jba,jbc->jac", basis, inc).reshape(-1, inc.shape[-1])
                               for basis, inc in zip(self.bases, increments)], axis=0)

    def values(self, increments: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Node values per level, starting from 0 at the root"""
        tree = self.tree
        levels = [np.zeros((1, increments[0].shape[-1]), dtype=increments[0].dtype)]
        for k, inc in enumerate(increments):
            levels.append(tree.expand(levels[-1]) + inc.reshape(tree.level_size(k + 1), -1))
        return levels

    def integrate(self, coords: np.ndarray) -> np.ndarray:
        """Coordinates of X∘M computed from the definition, one column per martingale"""
        x = self.values(self.increments(coords))
        return self.coordinates_of([x[k][:, None, :] * dm[:, :, None] for k, dm in enumerate(self.M.increments)])

    def coordinates(self, x: TreeMartingale) -> np.ndarray:
        if x.shape != ():
            raise ShapeMismatchError("operator coordinates are defined for scalar martingales")
        return self.coordinates_of([inc[..., None] for inc in x.increments])[:, 0]

    def to_martingale(self, coords: np.ndarray) -> TreeMartingale:
        incs = [inc[..., 0] for inc in self.increments(np.asarray(coords).reshape(self.dimension, 1))]
        return TreeMartingale.from_increments(self.tree, incs)

    @cached_property
    def gram(self) -> np.ndarray:
        """Block-diagonal Gram matrix of the H^2 inner product E<X, Y>_T"""
        tree = self.tree
        blocks = []
        for k, basis in enumerate(self.bases):
            weights = tree.node_probabilities(k)[:, None] * tree.probabilities[k]
            blocks.extend(np.einsum("jba,jb,jbc->jac", basis, weights, basis))
        return linalg.block_diag(*blocks)

    @cached_property
    def cholesky(self) -> np.ndarray:
        return linalg.cholesky(self.gram, lower=True)

    def power(self, n: int) -> np.ndarray:
        return np.linalg.matrix_power(self.matrix, n)

    def _whitened_transpose(self, operator: np.ndarray) -> np.ndarray:
        # L^-1 A^T L, the transpose of the operator in H^2-orthonormal coordinates
        L = self.cholesky
        return linalg.solve_triangular(L, operator.T @ L, lower=True)

    def h2_norm(self, operator: np.ndarray) -> float:
        """Exact H^2 operator norm"""
        return float(np.linalg.norm(self._whitened_transpose(operator), 2))

    def complex_norm(self, operator: np.ndarray) -> float:
        """H^2 norm of U + iV -> AU + iAV, computed on the realified space"""
        return float(np.linalg.norm(np.kron(np.eye(2), self._whitened_transpose(operator)), 2))

    def top_direction(self, operator: np.ndarray) -> np.ndarray:
        """Coordinates of a martingale attaining the H^2 operator norm"""
        u, _, _ = np.linalg.svd(self._whitened_transpose(operator))
        return linalg.solve_triangular(self.cholesky.T, u[:, 0], lower=False)

    def hp_norm(self, coords: np.ndarray, p: float) -> np.ndarray:
        """H^p norm of every coordinate column"""
        tree = self.tree
        incs = self.increments(coords)
        acc = np.zeros((1, incs[0].shape[-1]))
        for k, inc in enumerate(incs):
            acc = tree.expand(acc + np.einsum("jb,jbc->jc", tree.probabilities[k], np.abs(inc) ** 2))
        root = np.sqrt(acc)
        if np.isinf(p):
            return root.max(axis=0)
        return (tree.leaf_probabilities() @ root ** p) ** (1.0 / p)

    def hp_norm_estimate(self, operator: np.ndarray, p: float, restarts: int, seed: int = 0) -> Tuple[float, int]:
        """Lower estimate of the H^p operator norm by multistart L-BFGS-B over coordinates.

        The first start is the H^2-optimal direction; the rest are Gaussian.
        Returns the best ratio and the number of starts used.
        """
        if not np.any(operator):
            return 0.0, 0

        def ratio(c: np.ndarray) -> float:
            base = float(self.hp_norm(c, p)[0])
            return float(self.hp_norm(operator @ c, p)[0]) / base if base > 0 else 0.0

        rng = np.random.default_rng(np.random.SeedSequence(seed))
        starts = [self.top_direction(operator)] + [rng.normal(size=self.dimension) for _ in range(restarts)]
        best = 0.0
        for start in starts:
            result = optimize.minimize(lambda c: -ratio(c), start, method="L-BFGS-B", options={"maxiter": 200})
            best = max(best, ratio(start), -float(result.fun))
        return best, len(starts)

    def to_dict(self, include_matrix: bool = False) -> Dict[str, Any]:
        payload = {"dimension": self.dimension, "depth": self.tree.depth, "branching": self.tree.branching,
                   "audit_gap": self.audit_gap, "rank": int(np.linalg.matrix_rank(self.matrix)),
                   "basis": "orthonormal null space of the transition row at every node, level by level"}
        if include_matrix:
            payload["matrix"] = self.matrix.tolist()
        return payload


def audit_operator(opm: OperatorMatrix, trials: int, seed: int = 0) -> float:
    """Largest gap between the matrix image and stochastic_integral on random martingales"""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    worst = 0.0
    for _ in range(trials):
        x = random_martingale(opm.tree, rng)
        image = stochastic_integral(x.base, opm.M)
        worst = max(worst, float(np.max(np.abs(opm.matrix @ opm.coordinates(x) - opm.coordinates(image)))))
    return worst


def operator_matrix(m: TreeMartingale, audit_trials: Optional[int] = None, seed: int = 0,
                    settings: Optional[SpectralSettings] = None) -> OperatorMatrix:
    settings = settings or SpectralSettings()
    trials = settings.audit_trials if audit_trials is None else audit_trials
    if m.shape != ():
        raise ShapeMismatchError("operator matrices are built for a scalar driving martingale")
    tree = m.tree
    sizes = [(tree.branching - 1) * tree.level_size(k) for k in range(tree.depth)]
    offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(sizes)]))
    opm = OperatorMatrix(m, np.zeros((offsets[-1], offsets[-1])), centred_bases(tree), offsets)
    opm.matrix = opm.integrate(np.eye(opm.dimension))
    opm.audit_gap = audit_operator(opm, trials, seed)
    logger.info(f"Operator matrix: dimension {opm.dimension}, audit gap {opm.audit_gap:.3e} over {trials} martingales")
    return opm


def nilpotency_index(opm: OperatorMatrix, limit: Optional[int] = None) -> Optional[int]:
    """Smallest n with A^n = 0, searched up to T+1"""
    limit = opm.tree.depth + 1 if limit is None else limit
    scale = max(1.0, float(np.max(np.abs(opm.matrix))))
    power = np.eye(opm.dimension)
    for n in range(1, limit + 1):
        power = power @ opm.matrix
        if np.max(np.abs(power)) <= NILPOTENT_TOL * scale ** n:
            return n
    return None


@dataclass
class SpectralReport:
    backend: str
    p: float
    radius: float
    norms: List[float]
    roots: List[float]
    method: str
    nilpotency_index: Optional[int] = None
    window: Optional[Tuple[float, float]] = None
    n_used: Optional[int] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def truncated(self) -> bool:
        return self.n_used is not None and self.n_used < len(self.roots)

    def to_dict(self) -> Dict[str, Any]:
        return {"backend": self.backend, "p": self.p, "radius": self.radius, "norms": self.norms,
                "roots": self.roots, "method": self.method, "nilpotency_index": self.nilpotency_index,
                "window": list(self.window) if self.window is not None else None, "n_used": self.n_used,
                "truncated": self.truncated, "metadata": self.metadata, "error": self.error}


def spectral_radius_tree(opm: OperatorMatrix, p: float = 2.0, settings: Optional[SpectralSettings] = None,
                         seed: int = 0) -> SpectralReport:
    """r_p of X -> X∘M on a tree.

    Norms of A^n are exact at p = 2 and multistart lower estimates otherwise.
    Nilpotency certifies r_p = 0 for every p.
    """
    settings = settings or SpectralSettings()
    p = _check_p(p)
    index = nilpotency_index(opm)
    horizon = settings.n_max if index is None else min(settings.n_max, index - 1)
    norms: List[float] = []
    starts = 0
    power = np.eye(opm.dimension)
    for n in range(1, horizon + 1):
        power = power @ opm.matrix
        if p == 2.0:
            norms.append(opm.h2_norm(power))
        else:
            value, starts = opm.hp_norm_estimate(power, p, settings.restarts, seed + n)
            norms.append(value)
    roots = [v ** (1.0 / n) for n, v in enumerate(norms, start=1)]
    metadata: Dict[str, Any] = {"certified": p == 2.0, "starts": starts}
    if p == 2.0:
        metadata["eigenvalue_max"] = float(np.max(np.abs(np.linalg.eigvals(opm.matrix))))
    if index is not None:
        radius, method = 0.0, "nilpotent"
    else:
        radius, method = (min(roots) if roots else 0.0), "norm-power"
        logger.warning(f"operator not certified nilpotent within {opm.tree.depth + 1} powers")
    return SpectralReport(Backend.TREE.value, p, radius, norms, roots, method, index, (0.0, 0.0), metadata=metadata)


def b_point(report: ExponentReport) -> float:
    """Point value of b(M) from its bracket: midpoint, the lower end if open, +inf above the cap"""
    if np.isinf(report.hi):
        return np.inf if report.lo >= report.cap else report.lo
    return 0.5 * (report.lo + report.hi)


def bound_window(b: float, p: float) -> Tuple[float, float]:
    """[√p / b, √(2p(2p-1)) / b]; vanishes for b = +inf"""
    p = _check_p(p)
    if np.isinf(b):
        return 0.0, 0.0
    if b <= 0:
        return np.inf, np.inf
    return float(np.sqrt(p) / b), float(np.sqrt(2.0 * p * (2.0 * p - 1.0)) / b)


def _cumulative(increments: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros((increments.shape[0], 1)), np.cumsum(increments, axis=1)], axis=1)


def _bracket_norm(ensemble: PathEnsemble, bracket_increments: np.ndarray, p: float) -> Tuple[float, float]:
    report = norm_hp(ensemble.with_channel("phi_bracket", _cumulative(bracket_increments)), p, "phi_bracket")
    return report.value, report.error or 0.0


def spectral_radius_mc(ensemble: PathEnsemble, p: float = 2.0, n_max: Optional[int] = None,
                       probes: Optional[int] = None, seed: int = 0, b_report: Optional[ExponentReport] = None,
                       channel: str = "M", bracket_channel: str = "bracket",
                       settings: Optional[SpectralSettings] = None) -> SpectralReport:
    """Lower estimates of ‖φ^n‖^{1/n} on simulated paths.

    Probes are X = h∘M for the self-probe h = 1 and bounded integrands
    h = cos(ωW + θ). Each probe is iterated X -> X∘M with H^p normalization
    after every step; the ratio ‖φ^n X‖ / ‖X‖ is the product of the step norms.
    The estimate stops at the last n whose step norm has relative standard
    error within the MC tolerance.
    """
    settings = settings or SpectralSettings()
    p = _check_p(p)
    n_max = settings.n_max if n_max is None else n_max
    probes = settings.probes if probes is None else probes
    window = bound_window(b_point(b_report), p) if b_report is not None else None
    dm = ensemble.increments(channel)
    dq = ensemble.increments(bracket_channel)
    if not np.any(dq > 0):
        zeros = [0.0] * n_max
        return SpectralReport(Backend.MC.value, p, 0.0, zeros, zeros, "zero-bracket", window=window, n_used=n_max)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    plans: List[Tuple[str, Optional[float], Optional[float]]] = [("self", None, None)]
    for _ in range(probes):
        omega, theta = float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.0, 2.0 * np.pi))
        plans.append((f"cos({omega:.3f} W + {theta:.3f})", omega, theta))

    log_ratio = np.full((len(plans), n_max), -np.inf)
    rel_se = np.full((len(plans), n_max), np.inf)
    for j, (name, omega, theta) in enumerate(plans):
        h = 1.0 if omega is None else np.cos(omega * ensemble.brownian[:, :-1] + theta)
        base, _ = _bracket_norm(ensemble, h * h * dq, p)
        if base <= 0:
            continue
        x = _cumulative(h * dm) / base
        total = 0.0
        for n in range(n_max):
            left = x[:, :-1]
            value, err = _bracket_norm(ensemble, left * left * dq, p)
            if not np.isfinite(value) or value <= 0:
                break
            total += float(np.log(value))
            log_ratio[j, n] = total
            rel_se[j, n] = err / value
            x = _cumulative(left * dm) / value
        logger.debug(f"probe {name}: log ratios {log_ratio[j].round(4).tolist()}")

    orders = np.arange(1, n_max + 1)
    roots_all = np.exp(log_ratio / orders)
    best = np.argmax(roots_all, axis=0)
    cols = np.arange(n_max)
    roots = roots_all[best, cols]
    unstable = np.flatnonzero(rel_se[best, cols] > settings.mc_tolerance)
    n_used = int(unstable[0]) if unstable.size else n_max
    error = None
    if n_used < n_max:
        logger.warning(f"spectral estimate truncated at n={n_used} of {n_max}: relative error above "
                       f"{settings.mc_tolerance:g} with {ensemble.n_paths} paths")
    if n_used == 0:
        error = "first operator power already exceeds the MC tolerance"
    radius = float(roots[max(n_used, 1) - 1])
    return SpectralReport(
        Backend.MC.value, p, radius, np.exp(log_ratio[best, cols]).tolist(), roots.tolist(), "probe-maximum",
        window=window, n_used=n_used,
        metadata={"probes": [plan[0] for plan in plans], "best_probe": [plans[i][0] for i in best],
                  "relative_se": rel_se[best, cols].tolist(), "n_paths": ensemble.n_paths,
                  "b_hat": b_point(b_report) if b_report is not None else None},
        error=error,
    )


@dataclass
class ComplexExponential:
    """E(λM) along every path: continuous form exp(λM - ½λ²<M>) and discrete form Π(1 + λΔM)"""
    lam: complex
    backend: str
    continuous: np.ndarray
    discrete: np.ndarray
    vanished: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {"lambda": [self.lam.real, self.lam.imag], "backend": self.backend,
                "paths": int(self.continuous.shape[0]), "vanished_paths": int(self.vanished.sum())}


def _exponentials(m_paths: np.ndarray, q_paths: np.ndarray, lam: complex, backend: str) -> ComplexExponential:
    lam = complex(lam)
    factors = 1.0 + lam * np.diff(m_paths, axis=1)
    with np.errstate(over="ignore"):
        continuous = np.exp(lam * (m_paths - m_paths[:, :1]) - 0.5 * lam ** 2 * q_paths)
    discrete = np.concatenate([np.ones((m_paths.shape[0], 1), dtype=complex), np.cumprod(factors, axis=1)], axis=1)
    return ComplexExponential(lam, backend, continuous, discrete, np.any(np.abs(factors) < VANISHING_FACTOR, axis=1))


def tree_exponential(m: TreeMartingale, lam: complex) -> ComplexExponential:
    if m.shape != ():
        raise ShapeMismatchError("stochastic exponentials need a scalar martingale")
    return _exponentials(m.base.along_paths(), m.bracket.along_paths(), lam, Backend.TREE.value)


def mc_exponential(ensemble: PathEnsemble, lam: complex, channel: str = "M",
                   bracket_channel: str = "bracket") -> ComplexExponential:
    return _exponentials(ensemble.channel(channel), ensemble.channel(bracket_channel), lam, Backend.MC.value)


def path_martingale_gap(tree: TreeFiltration, paths: np.ndarray) -> float:
    """Largest |E[X_{k+1} | v] - X_v| over nodes, for a process given along every path"""
    worst = 0.0
    for k in range(tree.depth):
        stride = tree.branching ** (tree.depth - k)
        gap = node_conditional(tree, k, paths[:, k + 1]) - paths[::stride, k]
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst


def exponential_gaps(m: TreeMartingale, lam: complex) -> Dict[str, float]:
    """Martingale defect of both exponential forms; the discrete product has none"""
    exp = tree_exponential(m, lam)
    return {"continuous": path_martingale_gap(m.tree, exp.continuous),
            "discrete": path_martingale_gap(m.tree, exp.discrete)}


@dataclass
class ResolventReport:
    backend: str
    lam: complex
    p: float
    residual: float
    tol: float
    event_paths: int
    excluded_paths: int
    moment_sup: float
    moment_stderr: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.residual <= self.tol

    def to_dict(self) -> Dict[str, Any]:
        return {"backend": self.backend, "lambda": [self.lam.real, self.lam.imag], "p": self.p,
                "residual": self.residual, "tol": self.tol, "event_paths": self.event_paths,
                "excluded_paths": self.excluded_paths, "moment_sup": self.moment_sup,
                "moment_stderr": self.moment_stderr, "passed": self.passed, "metadata": self.metadata,
                "error": self.error}


def _resolvent_sides(E: np.ndarray, dml: np.ndarray, tau: np.ndarray, sigma: np.ndarray,
                     event: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """E_σ Σ_{τ<=j<σ} 1_A E_j^{-1} ΔM^λ_j, 1_A (E_σ / E_τ - 1) and E_σ / E_τ per path"""
    rows = np.arange(E.shape[0])
    steps = np.arange(dml.shape[1])[None, :]
    g = event[:, None] & (steps >= tau[:, None]) & (steps < sigma[:, None])
    e_sigma, e_tau = E[rows, sigma], E[rows, tau]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lhs = e_sigma * np.sum(np.where(g, dml / E[:, :-1], 0.0), axis=1)
        ratio = e_sigma / e_tau
        rhs = np.where(event, ratio - 1.0, 0.0)
    return lhs, rhs, ratio


def _check_event_measurable(tree: TreeFiltration, tau_levels: np.ndarray, event: np.ndarray) -> None:
    nodes = tree.path_nodes[np.arange(tree.n_leaves), tau_levels]
    spread = pd.Series(event).groupby(tau_levels * tree.n_leaves + nodes).nunique()
    if spread.max() > 1:
        raise ShapeMismatchError("event must be decided at tau: leaves below one stopping node disagree")


def _tree_stop(tree: TreeFiltration, at: StopArg, default: int) -> TreeStoppingTime:
    if at is None:
        return TreeStoppingTime.deterministic(tree, default)
    if isinstance(at, TreeStoppingTime):
        return at
    return TreeStoppingTime.deterministic(tree, int(at))


def _tree_resolvent(m: TreeMartingale, lam: complex, tau: StopArg, sigma: StopArg, event: Optional[np.ndarray],
                    p: float, tol: Optional[float]) -> ResolventReport:
    tree = m.tree
    tau_lv = _tree_stop(tree, tau, 0).stop_levels()
    sigma_lv = _tree_stop(tree, sigma, tree.depth).stop_levels()
    if np.any(tau_lv > sigma_lv):
        raise ShapeMismatchError("tau must not exceed sigma")
    event = np.ones(tree.n_leaves, dtype=bool) if event is None else np.asarray(event, dtype=bool)
    if event.shape != (tree.n_leaves,):
        raise ShapeMismatchError(f"event needs one flag per leaf ({tree.n_leaves}), got {event.shape}")
    _check_event_measurable(tree, tau_lv, event)

    exp = tree_exponential(m, lam)
    dm = np.diff(m.base.along_paths(), axis=1)
    factors = 1.0 + exp.lam * dm
    with np.errstate(divide="ignore", invalid="ignore"):
        dml = exp.lam * dm / factors
    before_sigma = np.arange(tree.depth)[None, :] < sigma_lv[:, None]
    excluded = np.any((np.abs(factors) < VANISHING_FACTOR) & before_sigma, axis=1)
    if excluded.any():
        logger.warning(f"1 + λΔM vanishes on {int(excluded.sum())} paths; excluded from the identity")
    lhs, rhs, ratio = _resolvent_sides(exp.discrete, dml, tau_lv, sigma_lv, event)

    keep = ~excluded
    diff = np.abs(lhs - rhs)[keep]
    scale = max(1.0, float(np.max(np.abs(rhs[keep]))) if keep.any() else 1.0)
    with np.errstate(invalid="ignore", over="ignore"):
        moment = np.where(keep, np.abs(ratio) ** p, 0.0)
    conditional = np.zeros(tree.n_leaves)
    for k in np.unique(tau_lv):
        rows = tau_lv == k
        conditional[rows] = node_conditional(tree, int(k), moment)[tree.path_nodes[rows, k]]
    selected = event & keep
    return ResolventReport(
        Backend.TREE.value, exp.lam, p, float(diff.max()) / scale if diff.size else 0.0,
        1e-10 if tol is None else tol, int(event.sum()), int(excluded.sum()),
        float(conditional[selected].max()) if selected.any() else 0.0,
        metadata={"exponential": "discrete", "rms_gap": float(np.sqrt(np.mean(diff ** 2))) if diff.size else 0.0,
                  "scale": scale},
    )


def _grid_index(at: StopArg, n: int, default: int) -> np.ndarray:
    if at is None:
        return np.full(n, default)
    if isinstance(at, GridStoppingTime):
        return at.capped()
    return np.full(n, int(at))


def _mc_resolvent(ensemble: PathEnsemble, lam: complex, tau: StopArg, sigma: StopArg, event: Optional[np.ndarray],
                  p: float, tol: Optional[float], channel: str, bracket_channel: str,
                  mc_settings: MonteCarloSettings) -> ResolventReport:
    n, steps = ensemble.n_paths, ensemble.grid.steps
    tau_idx, sigma_idx = _grid_index(tau, n, 0), _grid_index(sigma, n, steps)
    if np.any(tau_idx > sigma_idx):
        raise ShapeMismatchError("tau must not exceed sigma")
    event = np.ones(n, dtype=bool) if event is None else np.asarray(event, dtype=bool)
    if event.shape != (n,):
        raise ShapeMismatchError(f"event needs one flag per path ({n}), got {event.shape}")

    exp = mc_exponential(ensemble, lam, channel, bracket_channel)
    dml = exp.lam * ensemble.increments(channel) - exp.lam ** 2 * ensemble.increments(bracket_channel)
    excluded = ~np.all(np.isfinite(exp.continuous) & (np.abs(exp.continuous) > 0), axis=1)
    if excluded.any():
        logger.warning(f"exp(λM - ½λ²<M>) overflows or vanishes on {int(excluded.sum())} paths; excluded")
    lhs, rhs, ratio = _resolvent_sides(exp.continuous, dml, tau_idx, sigma_idx, event)

    keep = event & ~excluded
    diff = np.abs(lhs - rhs)[keep]
    rms = float(np.sqrt(np.mean(diff ** 2))) if diff.size else 0.0
    if tol is None:
        tol = RESOLVENT_MC_BAND * np.sqrt(ensemble.grid.dt) * max(1.0, abs(exp.lam)) ** 2
    moment_sup, moment_se = 0.0, None
    if keep.any():
        state = ensemble.channel(channel)[np.arange(n), tau_idx][keep]
        bins = bin_estimates(state, np.abs(ratio[keep]) ** p, mc_settings.n_bins, mc_settings.min_bin_count)
        usable = [b for b in bins if b.usable] or bins
        top = max(usable, key=lambda b: b.mean)
        moment_sup, moment_se = top.mean, top.stderr
    return ResolventReport(
        Backend.MC.value, exp.lam, p, rms, float(tol), int(event.sum()), int(excluded.sum()), moment_sup, moment_se,
        metadata={"exponential": "continuous", "rms_gap": rms, "max_gap": float(diff.max()) if diff.size else 0.0,
                  "dt": ensemble.grid.dt},
    )


def resolvent_probe(m: Union[TreeMartingale, PathEnsemble], lam: complex, tau: StopArg = None,
                    sigma: StopArg = None, event: Optional[np.ndarray] = None, p: float = 2.0,
                    tol: Optional[float] = None, channel: str = "M", bracket_channel: str = "bracket",
                    mc_settings: Optional[MonteCarloSettings] = None) -> ResolventReport:
    """Check E_σ ∫_τ^σ E^{-1} 1_A dM^λ = 1_A (E_σ / E_τ - 1) and report sup E[|E_σ / E_τ|^p | F_τ].

    Trees use the discrete exponential with ΔM^λ = λΔM / (1 + λΔM), for which
    the identity telescopes exactly. Paths use exp(λM - ½λ²<M>) with
    ΔM^λ = λΔM - λ²Δ<M>; the residual there is a discretization error.
    """
    p = _check_p(p)
    if isinstance(m, PathEnsemble):
        return _mc_resolvent(m, lam, tau, sigma, event, p, tol, channel, bracket_channel,
                             mc_settings or MonteCarloSettings())
    return _tree_resolvent(m, lam, tau, sigma, event, p, tol)


def resolvent_refinement(spec: MartingaleSpec, grid: TimeGrid, n_paths: int, seed: int, lam: complex,
                         levels: int = 3, mc_settings: Optional[MonteCarloSettings] = None) -> Tuple[pd.DataFrame, float]:
    """RMS resolvent residual on nested grids sharing one set of Brownian paths, with its fitted order in dt"""
    fine = simulate(spec, grid, n_paths, seed, mc_settings)
    rows = []
    for level in range(levels):
        factor = 2 ** level
        coarse = grid.coarsen(factor)
        brownian = fine.brownian[:, ::factor]
        ensemble = PathEnsemble(n_paths, coarse, seed, brownian, integrate_paths(spec, coarse, brownian), spec.name)
        report = resolvent_probe(ensemble, lam, mc_settings=mc_settings)
        rows.append({"steps": coarse.steps, "dt": coarse.dt, "rms_gap": report.residual,
                     "max_gap": report.metadata["max_gap"]})
    frame = pd.DataFrame(rows)
    order = float(np.polyfit(np.log(frame["dt"]), np.log(frame["rms_gap"]), 1)[0])
    logger.info(f"resolvent residual order in dt: {order:.3f} over {levels} grids")
    return frame, order


@dataclass
class BoundBatteryReport:
    backend: str
    b_hat: float
    rows: List[Dict[str, Any]]
    tolerance: float
    b_report: Optional[Dict[str, Any]] = None
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(row["upper_ok"] for row in self.rows)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"backend": self.backend, "b_hat": self.b_hat, "rows": self.rows, "tolerance": self.tolerance,
                "b_report": self.b_report, "passed": self.passed, "error": self.error}


def _bound_row(p: float, window: Tuple[float, float], radius: float, tol: float, **extra: Any) -> Dict[str, Any]:
    lower, upper = window
    return {"p": p, "lower": lower, "upper": upper, "r_hat": radius,
            "upper_ok": bool(radius <= upper * (1.0 + tol) + NILPOTENT_TOL),
            "lower_ok": bool(radius >= lower * (1.0 - tol) - NILPOTENT_TOL), **extra}


def bound_battery(m: Union[OperatorMatrix, TreeMartingale, PathEnsemble], p_list: Sequence[float],
                  stop_rule: Optional[BarrierRule] = None, b_report: Optional[ExponentReport] = None, seed: int = 0,
                  settings: Optional[SpectralSettings] = None,
                  exponent_settings: Optional[ExponentSettings] = None) -> BoundBatteryReport:
    """Compare r̂_p with [√p / b, √(2p(2p-1)) / b]; only the upper side is asserted"""
    settings = settings or SpectralSettings()
    tol = settings.mc_tolerance
    if not isinstance(m, PathEnsemble):
        opm = m if isinstance(m, OperatorMatrix) else operator_matrix(m, settings=settings)
        rows = [_bound_row(p, bound_window(np.inf, p), spectral_radius_tree(opm, p, settings, seed).radius, tol)
                for p in p_list]
        return BoundBatteryReport(Backend.TREE.value, np.inf, rows, tol)
    b_report = b_report or estimate_b(m, stop_rule=stop_rule, settings=exponent_settings, seed=seed)
    rows = []
    for p in p_list:
        report = spectral_radius_mc(m, p, seed=seed, b_report=b_report, settings=settings)
        rows.append(_bound_row(float(p), report.window, report.radius, tol, n_used=report.n_used))
        logger.info(f"p={p:g}: r̂={report.radius:.4f}, window [{report.window[0]:.4f}, {report.window[1]:.4f}]")
    return BoundBatteryReport(Backend.MC.value, b_point(b_report), rows, tol, b_report.to_dict())


def lambda_ray(ensemble: PathEnsemble, lambdas: Sequence[float], stop_rule: Optional[BarrierRule] = None,
               channel: str = "M", bracket_channel: str = "bracket",
               settings: Optional[ExponentSettings] = None, seed: int = 0) -> List[Dict[str, Any]]:
    """Classify the R_2 constant of Π(1 + λΔM) along a real λ ray.

    E[|Π(1 + λΔM)|² | F_σ] = E[Π(1 + λ²Δ<M>) | F_σ], so each path carries the
    exponent Σ_{s>=σ} log(1 + λ²Δ<M>_s) / λ² with coefficient λ².
    """
    settings = settings or ExponentSettings()
    dq = ensemble.increments(bracket_channel)
    censored, sigma = stop_info(ensemble, channel, bracket_channel, stop_rule)
    rows = []
    for lam in lambdas:
        c = float(abs(lam)) ** 2
        if c == 0.0:
            rows.append({"lambda": float(lam), "c": 0.0, "verdict": Verdict.FINITE.value, "estimate": 1.0})
            continue
        logs = np.log1p(c * dq) / c
        remaining = np.concatenate([np.cumsum(logs[:, ::-1], axis=1)[:, ::-1],
                                    np.zeros((ensemble.n_paths, 1))], axis=1)

        def variable(at, remaining=remaining):
            return remaining[:, at] if isinstance(at, (int, np.integer)) else at.value_at(remaining)

        probes = build_probes(ensemble, variable, channel, stop_rule, censored, sigma, settings, seed)
        verdict = classify_probes(probes, c) if probes else Verdict.FINITE
        estimate = float(np.mean(np.exp(np.minimum(c * remaining[:, 0], 700.0))))
        rows.append({"lambda": float(lam), "c": c, "verdict": verdict.value, "estimate": estimate})
        logger.info(f"λ-ray: λ={lam:g} -> {verdict.value} (E|E_T|² ≈ {estimate:.4g})")
    return rows


@dataclass
class EquivalenceReport:
    tree: Dict[str, Any]
    mc: Dict[str, Any]
    ray: List[Dict[str, Any]]
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.tree.get("holds")) and bool(self.mc.get("holds"))

    def to_dict(self) -> Dict[str, Any]:
        return {"tree": self.tree, "mc": self.mc, "ray": self.ray, "passed": self.passed, "error": self.error}


def equivalence_battery(tree_m: TreeMartingale, ensemble: PathEnsemble, stop_rule: Optional[BarrierRule] = None,
                        lambdas: Optional[Sequence[float]] = None, seed: int = 0,
                        settings: Optional[SpectralSettings] = None,
                        exponent_settings: Optional[ExponentSettings] = None) -> EquivalenceReport:
    """Joint checks of quasinilpotency, r_p = 0 and b = +inf on a tree, and their failure on paths.

    Tree side: A^{T+1} = 0, exact r_2 = 0 and the b = +inf verdict hold together.
    Path side: finite b̂, r̂ bounded away from 0 and a finite-to-divergent
    breakdown of the discrete exponential's R_2 constant along the λ ray.
    """
    settings = settings or SpectralSettings()
    lambdas = settings.ray_lambdas if lambdas is None else lambdas

    opm = operator_matrix(tree_m, settings=settings)
    tree_radius = spectral_radius_tree(opm, 2.0, settings, seed)
    b_tree = estimate_b(tree_m, settings=exponent_settings)
    index = tree_radius.nilpotency_index
    tree_side = {"depth": tree_m.tree.depth, "nilpotency_index": index, "radius": tree_radius.radius,
                 "b_infinite": bool(b_tree.above_cap), "audit_gap": opm.audit_gap,
                 "holds": bool(index is not None and index <= tree_m.tree.depth + 1
                               and tree_radius.radius == 0.0 and b_tree.above_cap)}

    b_report = estimate_b(ensemble, stop_rule=stop_rule, settings=exponent_settings, seed=seed)
    mc_radius = spectral_radius_mc(ensemble, 2.0, seed=seed, b_report=b_report, settings=settings)
    ray = lambda_ray(ensemble, lambdas, stop_rule, settings=exponent_settings, seed=seed)
    verdicts = [row["verdict"] for row in ray]
    breaks = bool(verdicts) and verdicts[0] == Verdict.FINITE.value and Verdict.INFINITE.value in verdicts
    crossover = next((row["lambda"] for row in ray if row["verdict"] == Verdict.INFINITE.value), None)
    mc_side = {"b_lo": b_report.lo, "b_hi": b_report.hi, "b_finite": not b_report.above_cap,
               "r_hat": mc_radius.radius, "r_floor": settings.r_floor, "ray_breaks": breaks,
               "ray_crossover": crossover,
               "holds": bool(not b_report.above_cap and mc_radius.radius >= settings.r_floor and breaks)}
    report = EquivalenceReport(tree_side, mc_side, ray)
    logger.info(f"Equivalence battery: tree {tree_side['holds']}, paths {mc_side['holds']}")
    return report


BUNDLED_SPECTRAL_CASES: Dict[str, Dict[str, Any]] = {
    "binary-depth3": {"backend": "tree", "depth": 3, "branching": 2, "generator": "coin", "scale": 1.0},
    "ternary-depth4": {"backend": "tree", "depth": 4, "branching": 3, "generator": "random", "seed": 5,
                       "scale": 0.5},
    "stopped-time-change": {"backend": "mc", "martingale": "stopped-time-change"},
    "brownian": {"backend": "mc", "martingale": "brownian"},
}


def build_spectral_martingale(doc: Dict[str, Any]) -> TreeMartingale:
    depth, scale = int(doc["depth"]), float(doc.get("scale", 1.0))
    if doc.get("generator") == "coin":
        return coin_martingale(depth, scale)
    rng = np.random.default_rng(np.random.SeedSequence(int(doc.get("seed", 0))))
    tree = random_tree(rng, depth, int(doc["branching"]), doc.get("generator", "random"))
    return random_martingale(tree, rng, scale)


def spectral_grid(spec: MartingaleSpec, settings: SpectralSettings) -> TimeGrid:
    """Grid ending at 1 - 2^-k for singular specs, [0, 1] otherwise, with step 2^-(k + offset)"""
    dt = 2.0 ** -(settings.mc_k + settings.mc_step_offset)
    t_end = 1.0 - 2.0 ** -settings.mc_k if spec.singular_time is not None else 1.0
    return TimeGrid.with_step(0.0, t_end, dt)


def build_spectral_ensemble(doc: Dict[str, Any], seed: int, settings: Optional[SpectralSettings] = None,
                            mc_settings: Optional[MonteCarloSettings] = None) -> Tuple[PathEnsemble, MartingaleSpec]:
    settings = settings or SpectralSettings()
    spec = bundled_spec(doc.get("martingale", "stopped-time-change"))
    grid = spectral_grid(spec, settings)
    return simulate(spec, grid, int(doc.get("paths", settings.mc_paths)), seed, mc_settings), spec

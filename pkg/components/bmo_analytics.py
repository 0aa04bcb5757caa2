"""
BMO Analytics
R^p, H^p and BMO norms, reverse Hölder constants, Kazamaki exponents and epsilon-slicing certificates
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from components.errors import (
    ConfigurationError,
    EmptyEnsembleError,
    InvalidExponentError,
    NonPositiveDensityError,
    SliceImpossibleError,
)
from components.filtration_tree import (
    ProcessKind,
    TreeFiltration,
    TreeMartingale,
    TreeProcess,
    TreeStoppingTime,
    conditional_expectation,
)
from components.montecarlo_paths import (
    BarrierRule,
    GridStoppingTime,
    MartingaleSpec,
    PathEnsemble,
    PathSimulator,
    TimeGrid,
    bin_estimates,
    hit_time,
)
from config.lab_config import (
    Backend,
    BarrierKind,
    ExponentSettings,
    MonteCarloSettings,
    NormName,
    Verdict,
)

logger = logging.getLogger(__name__)

Martingale = Union[TreeMartingale, PathEnsemble]


@dataclass
class NormReport:
    name: str
    p: float
    value: float
    backend: str
    error: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "p": self.p, "value": self.value, "backend": self.backend,
                "error": self.error, "metadata": self.metadata}


def _check_p(p: float) -> float:
    p = float(p)
    if not p >= 1.0:
        raise InvalidExponentError(f"exponent p must lie in [1, inf], got {p}")
    return p


def _lp_of_leaves(tree: TreeFiltration, leaves: np.ndarray, p: float) -> float:
    leaves = np.abs(leaves)
    if np.isinf(p):
        return float(np.max(leaves))
    return float(tree.expectation(leaves ** p) ** (1.0 / p))


def _lp_of_samples(samples: np.ndarray, p: float) -> Tuple[float, Optional[float]]:
    """Sample L^p norm with a delta-method standard error"""
    samples = np.abs(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise EmptyEnsembleError("no samples for an L^p norm")
    if np.isinf(p):
        return float(samples.max()), None
    moment = samples ** p
    mean = float(moment.mean())
    if samples.size < 2 or mean == 0.0:
        return mean ** (1.0 / p), 0.0
    se_mean = float(moment.std(ddof=1) / np.sqrt(samples.size))
    return mean ** (1.0 / p), se_mean * mean ** (1.0 / p - 1.0) / p


def _as_process(x: Union[TreeProcess, TreeMartingale]) -> TreeProcess:
    return x.base if isinstance(x, TreeMartingale) else x


def norm_rp(x: Union[TreeProcess, TreeMartingale, PathEnsemble], p: float, channel: str = "M") -> NormReport:
    """‖X‖_{R^p} = ‖sup_t |X_t|‖_{L^p}"""
    p = _check_p(p)
    if isinstance(x, PathEnsemble):
        running = np.max(np.abs(x.channel(channel)), axis=1)
        value, err = _lp_of_samples(running, p)
        return NormReport(NormName.RP.value, p, value, Backend.MC.value, err, {"channel": channel})
    process = _as_process(x)
    leaves = process.running_max().along_paths()[:, -1]
    return NormReport(NormName.RP.value, p, _lp_of_leaves(process.tree, leaves, p), Backend.TREE.value)


def norm_hp(m: Martingale, p: float, bracket_channel: str = "bracket") -> NormReport:
    """‖M‖_{H^p} = ‖<M>_T^{1/2}‖_{L^p}"""
    p = _check_p(p)
    if isinstance(m, PathEnsemble):
        value, err = _lp_of_samples(np.sqrt(m.channel(bracket_channel)[:, -1]), p)
        return NormReport(NormName.HP.value, p, value, Backend.MC.value, err, {"channel": bracket_channel})
    leaves = np.sqrt(np.maximum(m.bracket.terminal, 0.0))
    return NormReport(NormName.HP.value, p, _lp_of_leaves(m.tree, leaves, p), Backend.TREE.value)


def norm_lp(tree: TreeFiltration, leaves: np.ndarray, p: float) -> NormReport:
    p = _check_p(p)
    leaves = np.asarray(leaves)
    if leaves.ndim > 1:
        leaves = np.linalg.norm(leaves.reshape(leaves.shape[0], -1), axis=1)
    return NormReport(NormName.LP.value, p, _lp_of_leaves(tree, leaves, p), Backend.TREE.value)


def tail_sum(step: TreeProcess, mask: Optional[Sequence[np.ndarray]] = None) -> TreeProcess:
    """R_v = step(v) + E[R_child | v], optionally counting only masked steps"""
    tree = step.tree
    levels: List[Optional[np.ndarray]] = [None] * (tree.depth + 1)
    levels[tree.depth] = np.zeros(tree.n_leaves)
    for k in range(tree.depth - 1, -1, -1):
        s = np.real(step.values[k])
        if mask is not None:
            s = np.where(mask[k], s, 0.0)
        levels[k] = s + tree.average(levels[k + 1], k)
    return TreeProcess(tree, tuple(levels))


def node_conditional(tree: TreeFiltration, k: int, leaf_values: np.ndarray) -> np.ndarray:
    """E[x | v] for every level-k node v, given one value per leaf"""
    weights = tree.leaf_probabilities().reshape(tree.level_size(k), -1)
    grouped = np.asarray(leaf_values).reshape(weights.shape + np.shape(leaf_values)[1:])
    return np.einsum("jl,jl...->j...", weights, grouped) / weights.sum(axis=1).reshape(
        (-1,) + (1,) * (grouped.ndim - 2))


def subtree_leaves(tree: TreeFiltration, k: int, node_values: np.ndarray) -> np.ndarray:
    """Broadcast level-k node values onto the leaves below them"""
    return np.repeat(node_values, tree.branching ** (tree.depth - k), axis=0)


@dataclass
class MonteCarloSup:
    value: float
    stderr: float
    probe: str
    bin_mean: float
    probes_used: int


def mc_probe_family(ensemble: PathEnsemble, state_channel: str,
                    settings: MonteCarloSettings) -> List[Tuple[str, Union[int, GridStoppingTime]]]:
    """Deterministic grid times plus hitting times of |state| at quantile levels.

    Every grid time t_0 .. t_{n-1} is probed unless settings.probe_times thins them.
    """
    steps = ensemble.grid.steps
    if settings.probe_times is None or steps <= settings.probe_times:
        times = list(range(steps))
    else:
        times = sorted(set(int(t) for t in np.linspace(0, steps - 1, settings.probe_times).round()))
    probes: List[Tuple[str, Union[int, GridStoppingTime]]] = [(f"t_{k}", k) for k in times]
    terminal = np.abs(ensemble.channel(state_channel)[:, -1])
    positive = terminal[terminal > 0]
    if positive.size and settings.hitting_levels > 0:
        qs = np.arange(1, settings.hitting_levels + 1) / (settings.hitting_levels + 1)
        for level in np.unique(np.quantile(positive, qs)):
            rule = BarrierRule(BarrierKind.ABS_ABOVE, float(level))
            probes.append((f"hit |{state_channel}| > {level:.4g}", hit_time(ensemble, state_channel, rule)))
    return probes


def mc_conditional_sup(ensemble: PathEnsemble, target: Callable[[Union[int, GridStoppingTime]], np.ndarray],
                       state_channel: str, settings: Optional[MonteCarloSettings] = None) -> MonteCarloSup:
    """Lower estimate of sup over the probe family of ess-sup E[target | F_tau].

    Each probe is binned on its Markov state (the state channel at a grid time,
    the hitting index for barrier probes). The reported bin is the one with the
    largest lower confidence bound.
    """
    settings = settings or MonteCarloSettings()
    if ensemble.n_paths == 0:
        raise EmptyEnsembleError("ensemble has no paths")
    best: Optional[MonteCarloSup] = None
    best_score = -np.inf
    probes = mc_probe_family(ensemble, state_channel, settings)
    for name, at in probes:
        values = target(at)
        if isinstance(at, GridStoppingTime):
            keep = at.stopped
            if keep.sum() < settings.min_bin_count:
                continue
            state, values = at.index[keep].astype(float), values[keep]
        else:
            state = ensemble.channel(state_channel)[:, at]
        for b in bin_estimates(state, values, settings.n_bins, settings.min_bin_count):
            if not b.usable:
                continue
            score = b.mean - settings.confidence_sigmas * b.stderr
            if score > best_score:
                best_score = score
                best = MonteCarloSup(b.mean, b.stderr, name, b.mean, len(probes))
    if best is None:
        raise EmptyEnsembleError("no probe produced a usable bin")
    return best


def bmo_norm(m: Martingale, channel: str = "M", bracket_channel: str = "bracket",
             settings: Optional[MonteCarloSettings] = None) -> NormReport:
    """‖M‖_BMO² = sup_tau ess-sup E[<M>_T - <M>_tau | F_tau]"""
    if isinstance(m, PathEnsemble):
        bracket = m.channel(bracket_channel)
        terminal = bracket[:, -1]
        sup = mc_conditional_sup(
            m, lambda at: terminal - (bracket[:, at] if isinstance(at, (int, np.integer)) else at.value_at(bracket)),
            channel, settings,
        )
        value = float(np.sqrt(max(sup.value, 0.0)))
        err = sup.stderr / (2.0 * value) if value > 0 else sup.stderr
        return NormReport(NormName.BMO.value, np.inf, value, Backend.MC.value, err,
                          {"probe": sup.probe, "probes": sup.probes_used, "lower_bound": True})
    remaining = m.remaining_bracket()
    k, j = _argmax_node(remaining)
    value = float(np.sqrt(max(remaining.values[k][j], 0.0)))
    return NormReport(NormName.BMO.value, np.inf, value, Backend.TREE.value, None, {"argmax_node": [k, j]})


def _argmax_node(process: TreeProcess) -> Tuple[int, int]:
    best, node = -np.inf, (0, 0)
    for k, v in enumerate(process.values):
        if v.size and np.max(np.real(v)) > best:
            best, node = float(np.max(np.real(v))), (k, int(np.argmax(np.real(v))))
    return node


def bmo_value(m: TreeMartingale) -> float:
    return bmo_norm(m).value


def reverse_holder_constant(l: Union[TreeProcess, TreeMartingale, PathEnsemble], p: float,
                            channel: str = "density",
                            settings: Optional[MonteCarloSettings] = None) -> NormReport:
    """sup_tau ess-sup E[(L_T / L_tau)^p | F_tau]"""
    p = _check_p(p)
    if isinstance(l, PathEnsemble):
        values = l.channel(channel)
        if np.any(values <= 0):
            row, col = np.argwhere(values <= 0)[0]
            raise NonPositiveDensityError((int(col), int(row)), float(values[row, col]))
        terminal = values[:, -1]

        def ratio(at):
            start = values[:, at] if isinstance(at, (int, np.integer)) else at.value_at(values)
            return (terminal / start) ** p

        sup = mc_conditional_sup(l, ratio, channel, settings)
        return NormReport(NormName.REVERSE_HOLDER.value, p, sup.value, Backend.MC.value, sup.stderr,
                          {"probe": sup.probe, "probes": sup.probes_used, "lower_bound": True})
    process = _as_process(l)
    for k, v in enumerate(process.values):
        if np.any(np.real(v) <= 0):
            j = int(np.argmax(np.real(v) <= 0))
            raise NonPositiveDensityError((k, j), float(np.real(v[j])))
    tree = process.tree
    powered = conditional_expectation(np.abs(process.terminal) ** p, tree=tree)
    g = TreeProcess(tree, tuple(powered.values[k] / np.abs(process.values[k]) ** p for k in range(tree.depth + 1)))
    k, j = _argmax_node(g)
    return NormReport(NormName.REVERSE_HOLDER.value, p, float(g.values[k][j]), Backend.TREE.value, None,
                      {"argmax_node": [k, j]})


# ---------------------------------------------------------------------------
# Epsilon slicing
# ---------------------------------------------------------------------------

@dataclass
class SliceCertificate:
    """Slices of one or more martingales; the step out of node v belongs to slice slice_index[k][j]"""
    tree: TreeFiltration
    eps: List[float]
    slice_index: Tuple[np.ndarray, ...]
    boundaries: List[TreeStoppingTime]
    slice_norms: np.ndarray
    names: List[str] = field(default_factory=list)
    step_brackets: List[TreeProcess] = field(default_factory=list, repr=False)

    @property
    def n_slices(self) -> int:
        return int(self.slice_norms.shape[0])

    @property
    def epsilon(self) -> float:
        return self.eps[0]

    def mask(self, i: int) -> Tuple[np.ndarray, ...]:
        return tuple(level == i for level in self.slice_index)

    def validate(self, tol: float = 1e-12) -> bool:
        """Recompute every slice BMO norm from the step brackets and compare with eps"""
        for i in range(self.n_slices):
            mask = self.mask(i)
            for j, step in enumerate(self.step_brackets):
                if _slice_norm(step, mask) > self.eps[j] + tol:
                    return False
        return True

    def to_dict(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "names": self.names,
            "n_slices": self.n_slices,
            "slice_norms": self.slice_norms.tolist(),
            "boundary_nodes": [tau.stopping_nodes() for tau in self.boundaries[:-1]],
        }


def _slice_norm(step: TreeProcess, mask: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(max(max(np.max(v) for v in tail_sum(step, mask).values), 0.0)))


def joint_slice(martingales: Sequence[TreeMartingale], eps: Sequence[float],
                names: Optional[Sequence[str]] = None) -> SliceCertificate:
    """Greedy forward slicing of several martingales on one tree.

    Every node carries the step bracket accumulated along its path since the
    current slice began. A node starts a new slice when adding its own step would
    push any accumulated bracket past eps². A slice start whose whole subtree
    BMO² fits under eps² for every martingale settles: no later boundaries.
    """
    if not martingales:
        raise ConfigurationError("joint_slice needs at least one martingale")
    eps = [float(e) for e in eps]
    if len(eps) != len(martingales) or any(not e > 0 for e in eps):
        raise ConfigurationError(f"need one positive eps per martingale, got {eps}")
    tree = martingales[0].tree
    steps = [m.step_bracket for m in martingales]
    caps = np.array(eps) ** 2
    remaining = [m.remaining_bracket() for m in martingales]
    subtree_max = [_subtree_max(r) for r in remaining]
    _check_single_steps(steps, eps, tree.depth)

    idx = np.zeros(1, dtype=int)
    acc = np.zeros((1, len(martingales)))
    settled = np.zeros(1, dtype=bool)
    start = np.ones(1, dtype=bool)
    slice_index = []
    for k in range(tree.depth):
        delta = np.stack([np.real(s.values[k]) for s in steps], axis=1)
        live = ~settled
        over = live & ~start & np.any(acc + delta > caps, axis=1)
        idx = idx + over
        start = start | over
        fresh = live & start
        if np.any(fresh):
            acc = np.where(fresh[:, None], 0.0, acc)
            fits = np.all(np.stack([sm[k] for sm in subtree_max], axis=1) <= caps, axis=1)
            settled = settled | (fresh & fits)
        acc = acc + delta
        slice_index.append(idx.copy())
        idx = tree.expand(idx)
        acc = tree.expand(acc)
        settled = tree.expand(settled)
        start = np.zeros(tree.level_size(k + 1), dtype=bool)

    n_slices = int(max(np.max(level) for level in slice_index)) + 1
    boundaries = []
    for i in range(n_slices):
        flags = [level >= i for level in slice_index] + [np.ones(tree.n_leaves, dtype=bool)]
        boundaries.append(TreeStoppingTime(tree, tuple(flags)))
    boundaries.append(TreeStoppingTime.deterministic(tree, tree.depth))
    norms = np.array([[_slice_norm(step, tuple(level == i for level in slice_index)) for step in steps]
                      for i in range(n_slices)])
    certificate = SliceCertificate(tree, eps, tuple(slice_index), boundaries, norms,
                                   list(names or [f"M{j}" for j in range(len(martingales))]), steps)
    logger.debug(f"sliced {len(martingales)} martingale(s) at eps={eps} into {n_slices} slices")
    return certificate


def _check_single_steps(steps: Sequence[TreeProcess], eps: Sequence[float], depth: int) -> None:
    """Raise at the first step bracket above eps², reporting the eps that admits every step"""
    for which, step in enumerate(steps):
        levels = [np.real(v) for v in step.values[:depth]]
        cap = eps[which] ** 2
        largest = max(float(np.max(v)) for v in levels)
        if largest > cap:
            k = next(k for k, v in enumerate(levels) if np.any(v > cap))
            j = int(np.argmax(levels[k] > cap))
            raise SliceImpossibleError((k, j), float(levels[k][j]), eps[which], largest)


def _subtree_max(process: TreeProcess) -> List[np.ndarray]:
    """Per node, the max of the process over the node and all its descendants"""
    tree = process.tree
    levels: List[Optional[np.ndarray]] = [None] * (tree.depth + 1)
    levels[tree.depth] = np.real(process.values[tree.depth])
    for k in range(tree.depth - 1, -1, -1):
        children = levels[k + 1].reshape(tree.level_size(k), tree.branching).max(axis=1)
        levels[k] = np.maximum(np.real(process.values[k]), children)
    return levels


def epsilon_slice(m: TreeMartingale, eps: float) -> SliceCertificate:
    if not isinstance(m, TreeMartingale):
        raise ConfigurationError("epsilon slicing runs on the tree backend only")
    return joint_slice([m], [eps])


# ---------------------------------------------------------------------------
# Exponential-moment classification and Kazamaki exponents
# ---------------------------------------------------------------------------

@dataclass
class TailFit:
    """Constant-hazard fit of the upper tail of an exponent variable"""
    kappa_hat: float
    stderr: float
    kappa_lo: float
    kappa_hi: float
    events: int
    window: Tuple[float, float]
    overshoot: float = 0.0
    light_tail: bool = False
    n: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def _hazard(y: np.ndarray, events_mask: np.ndarray, a: float, b: float) -> Tuple[float, float, int, np.ndarray]:
    in_window = events_mask & (y >= a) & (y < b)
    events = int(in_window.sum())
    exposure = float(np.clip(np.minimum(y, b) - a, 0.0, None).sum())
    if events == 0 or exposure <= 0.0:
        return np.inf, np.inf, events, in_window
    kappa = events / exposure
    return kappa, kappa / np.sqrt(events), events, in_window


def fit_tail(y: np.ndarray, censored: Optional[np.ndarray] = None, step_sigma: Optional[np.ndarray] = None,
             barrier: float = 1.0, settings: Optional[ExponentSettings] = None,
             sigmas: float = 3.0) -> TailFit:
    """Band [kappa_lo, kappa_hi] for the exponential tail rate of y.

    Censored samples contribute exposure only. The upper edge is widened by the
    one-step overshoot of discretely monitored barriers.
    """
    settings = settings or ExponentSettings()
    y = np.asarray(y, dtype=float)
    n = y.size
    censored = np.zeros(n, dtype=bool) if censored is None else np.asarray(censored, dtype=bool)
    if n == 0:
        return TailFit(np.inf, 0.0, np.inf, np.inf, 0, (0.0, 0.0), n=0)
    u0 = float(np.quantile(y, settings.tail_quantile_start))
    u1 = float(np.quantile(y, 1.0 - settings.tail_min_at_risk))
    if not u1 > u0:
        return TailFit(np.inf, 0.0, np.inf, np.inf, 0, (u0, u1), light_tail=True, n=n)
    observed = ~censored
    kappa, se, events, window_events = _hazard(y, observed, u0, u1)
    if events < settings.min_tail_events:
        return TailFit(kappa, se, 0.0, np.inf, events, (u0, u1), n=n)
    um = 0.5 * (u0 + u1)
    k1, se1, _, _ = _hazard(y, observed, u0, um)
    k2, se2, _, _ = _hazard(y, observed, um, u1)
    light = bool(np.isfinite(k1) and (np.isinf(k2) or k2 - k1 > sigmas * np.hypot(se1, se2)))
    delta = 0.0
    if step_sigma is not None:
        sig = np.asarray(step_sigma, dtype=float)[window_events]
        sig = sig[np.isfinite(sig)]
        if sig.size:
            delta = settings.overshoot_coefficient * float(np.quantile(sig, settings.overshoot_quantile)) / barrier
    if light:
        return TailFit(kappa, se, np.inf, np.inf, events, (u0, u1), delta, True, n)
    kappa_lo = max(min(kappa - sigmas * se, k2 - sigmas * se2), 0.0)
    kappa_hi = (kappa + sigmas * se) * (1.0 + delta) ** 2
    return TailFit(kappa, se, kappa_lo, kappa_hi, events, (u0, u1), delta, False, n)


class DoublingDiagnostic:
    """Median-of-means of exp(c·y) at three successive doublings of the subsample size"""

    def __init__(self, y: np.ndarray, seed: int = 0, settings: Optional[ExponentSettings] = None):
        self.settings = settings or ExponentSettings()
        self.y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        n = self.y.size
        self.sizes = [n // 16, n // 8, n // 4]
        self.plans = []
        if self.sizes[0] >= 8:
            for size in self.sizes:
                self.plans.append([rng.choice(n, size, replace=False) for _ in range(self.settings.doubling_subsamples)])

    def growth(self, c: float) -> List[float]:
        if not self.plans:
            return []
        x = np.exp(np.minimum(c * self.y, 700.0))
        medians = [float(np.median([x[ix].mean() for ix in plan])) for plan in self.plans]
        return [medians[i + 1] / medians[i] for i in range(len(medians) - 1)]

    def fires(self, c: float) -> bool:
        run = 0
        for ratio in self.growth(c):
            run = run + 1 if ratio > self.settings.doubling_factor else 0
            if run >= self.settings.doubling_runs:
                return True
        return False


@dataclass
class ExponentProbe:
    """One stopping time of the probe family with its tail fit and doubling plan"""
    name: str
    fit: TailFit
    doubling: DoublingDiagnostic

    def classify(self, c: float) -> Verdict:
        if c <= self.fit.kappa_lo:
            return Verdict.FINITE
        if c >= self.fit.kappa_hi or self.doubling.fires(c):
            return Verdict.INFINITE
        return Verdict.UNDETERMINED


def classify_probes(probes: Sequence[ExponentProbe], c: float) -> Verdict:
    verdicts = [probe.classify(c) for probe in probes]
    if any(v == Verdict.INFINITE for v in verdicts):
        return Verdict.INFINITE
    if all(v == Verdict.FINITE for v in verdicts):
        return Verdict.FINITE
    return Verdict.UNDETERMINED


@dataclass
class ExponentReport:
    name: str
    lo: float
    hi: float
    cap: float
    backend: str
    probes: List[str] = field(default_factory=list)
    rationale: str = ""
    steps: List[Dict[str, Any]] = field(default_factory=list)
    fits: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    @property
    def above_cap(self) -> bool:
        return np.isinf(self.hi)

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "lo": self.lo, "hi": self.hi, "cap": self.cap, "backend": self.backend,
                "probes": self.probes, "rationale": self.rationale, "steps": self.steps, "fits": self.fits}


def bisect_exponent(name: str, probes: Sequence[ExponentProbe], coefficient: Callable[[float], float],
                    cap: float, tol: float, backend: str = Backend.MC.value) -> ExponentReport:
    """Bracket the critical exponent: lo = sup of certified-finite, hi = inf of certified-infinite"""
    steps: List[Dict[str, Any]] = []

    def classify(x: float) -> Verdict:
        verdict = classify_probes(probes, coefficient(x))
        steps.append({"x": x, "c": coefficient(x), "verdict": verdict.value})
        return verdict

    at_cap = classify(cap)
    report = ExponentReport(name, 0.0, np.inf, cap, backend, [p.name for p in probes],
                            fits={p.name: p.fit.to_dict() for p in probes})
    if at_cap == Verdict.FINITE:
        report.lo = cap
        report.rationale = f"moments certified finite up to the cap {cap:g}; reported as +inf"
        report.steps = steps
        return report
    lo, hi = 0.0, cap
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if classify(mid) == Verdict.FINITE:
            lo = mid
        else:
            hi = mid
    report.lo = lo
    if at_cap == Verdict.INFINITE:
        lo2, hi2 = lo, cap
        while hi2 - lo2 > tol:
            mid = 0.5 * (lo2 + hi2)
            if classify(mid) == Verdict.INFINITE:
                hi2 = mid
            else:
                lo2 = mid
        report.hi = hi2
        report.rationale = "bisection between certified-finite and certified-infinite exponents"
    else:
        report.rationale = f"no certified divergence below the cap {cap:g}; upper end reported as +inf"
    report.steps = steps
    logger.info(f"{name}(M) bracket [{report.lo:.4g}, {report.hi:.4g}] after {len(steps)} classifications")
    return report


def _tree_exponent(name: str, cap: float) -> ExponentReport:
    return ExponentReport(name, cap, np.inf, cap, Backend.TREE.value,
                          rationale="bracket and increments are bounded on a finite tree; exponent is +inf")


def _exponent_probes(ensemble: PathEnsemble, channel: str, stop_rule: Optional[BarrierRule],
                     max_hits: int = 2) -> List[Tuple[str, Union[int, GridStoppingTime]]]:
    """sigma = 0, two deterministic grid times and hitting times of |M| at fractions of the barrier"""
    steps = ensemble.grid.steps
    probes: List[Tuple[str, Union[int, GridStoppingTime]]] = [("t_0", 0), (f"t_{steps // 4}", steps // 4),
                                                              (f"t_{steps // 2}", steps // 2)]
    level = stop_rule.level if stop_rule is not None else float(np.quantile(np.abs(ensemble.channel(channel)[:, -1]), 0.75))
    for frac in (0.5, 0.25)[:max_hits]:
        rule = BarrierRule(BarrierKind.ABS_ABOVE, frac * level)
        probes.append((f"hit |{channel}| > {frac * level:.4g}", hit_time(ensemble, channel, rule)))
    return probes


def stop_info(ensemble: PathEnsemble, channel: str, bracket_channel: str,
               stop_rule: Optional[BarrierRule]) -> Tuple[np.ndarray, np.ndarray]:
    """Censoring mask (never stopped) and the bracket std of the stopping step per path"""
    n = ensemble.n_paths
    if stop_rule is None:
        return np.zeros(n, dtype=bool), np.full(n, np.nan)
    tau = hit_time(ensemble, channel, stop_rule)
    bracket = ensemble.channel(bracket_channel)
    sigma = np.full(n, np.nan)
    rows = np.flatnonzero(tau.stopped & (tau.index > 0))
    sigma[rows] = np.sqrt(bracket[rows, tau.index[rows]] - bracket[rows, tau.index[rows] - 1])
    censored = ~tau.stopped
    truncated = int(censored.sum())
    if truncated:
        logger.warning(f"{truncated} of {n} paths not stopped by the horizon; treated as censored")
    return censored, sigma


def probe_samples(ensemble: PathEnsemble, variable: Callable[[Union[int, GridStoppingTime]], np.ndarray],
                  channel: str, stop_rule: Optional[BarrierRule],
                  probe_points: Optional[List[Tuple[str, Union[int, GridStoppingTime]]]] = None
                  ) -> List[Tuple[str, np.ndarray]]:
    """Per probe, the exponent variable of every path; 0 where a hitting probe never fired"""
    points = probe_points if probe_points is not None else _exponent_probes(ensemble, channel, stop_rule)
    samples = []
    for name, at in points:
        y = np.asarray(variable(at), dtype=float)
        if isinstance(at, GridStoppingTime):
            y = np.where(at.stopped, y, 0.0)
        samples.append((name, y))
    return samples


def probes_from_samples(samples: Sequence[Tuple[str, np.ndarray]], censored: np.ndarray,
                        step_sigma: Optional[np.ndarray], barrier: float, settings: ExponentSettings,
                        seed: int = 0) -> List[ExponentProbe]:
    probes = []
    for i, (name, y) in enumerate(samples):
        alive = y > 0
        if alive.sum() == 0:
            continue
        sig = step_sigma[alive] if step_sigma is not None else None
        fit = fit_tail(y[alive], censored[alive], sig, barrier, settings)
        doubling = DoublingDiagnostic(y[alive & ~censored], seed=seed + i, settings=settings)
        probes.append(ExponentProbe(name, fit, doubling))
    return probes


def build_probes(ensemble: PathEnsemble, variable: Callable[[Union[int, GridStoppingTime]], np.ndarray],
                 channel: str, stop_rule: Optional[BarrierRule], censored: np.ndarray,
                 step_sigma: Optional[np.ndarray], settings: ExponentSettings, seed: int = 0,
                 probe_points: Optional[List[Tuple[str, Union[int, GridStoppingTime]]]] = None) -> List[ExponentProbe]:
    barrier = stop_rule.level if stop_rule is not None else 1.0
    samples = probe_samples(ensemble, variable, channel, stop_rule, probe_points)
    return probes_from_samples(samples, censored, step_sigma, barrier, settings, seed)


@dataclass
class ExponentSamples:
    """Per-path inputs of the exponent classifier, detached from the path arrays"""
    terminal_bracket: np.ndarray
    censored: np.ndarray
    step_sigma: Optional[np.ndarray]
    samples: List[Tuple[str, np.ndarray]]

    @classmethod
    def concatenate(cls, parts: Sequence["ExponentSamples"]) -> "ExponentSamples":
        sigma = None if parts[0].step_sigma is None else np.concatenate([p.step_sigma for p in parts])
        names = [name for name, _ in parts[0].samples]
        return cls(np.concatenate([p.terminal_bracket for p in parts]),
                   np.concatenate([p.censored for p in parts]), sigma,
                   [(name, np.concatenate([p.samples[i][1] for p in parts])) for i, name in enumerate(names)])


def exponent_samples(ensemble: PathEnsemble, name: str, channel: str = "M", bracket_channel: str = "bracket",
                     stop_rule: Optional[BarrierRule] = None) -> ExponentSamples:
    """Exponent variables of a(M) (|M_T - M_σ|) or b(M) (<M>_T - <M>_σ) at every probe σ"""
    bracket = ensemble.channel(bracket_channel)
    if name == "b":
        values, terminal = bracket, bracket[:, -1]
        censored, sigma = stop_info(ensemble, channel, bracket_channel, stop_rule)
    elif name == "a":
        values = ensemble.channel(channel)
        terminal = values[:, -1]
        censored, _ = stop_info(ensemble, channel, bracket_channel, stop_rule)
        sigma = None
    else:
        raise ConfigurationError(f"unknown exponent '{name}'; expected 'a' or 'b'")

    def variable(at):
        start = values[:, at] if isinstance(at, (int, np.integer)) else at.value_at(values)
        return terminal - start if name == "b" else np.abs(terminal - start)

    return ExponentSamples(bracket[:, -1], censored, sigma, probe_samples(ensemble, variable, channel, stop_rule))


def exponent_from_samples(name: str, data: ExponentSamples, stop_rule: Optional[BarrierRule],
                          settings: ExponentSettings, cap: float, tol: float, seed: int = 0) -> ExponentReport:
    terminal = data.terminal_bracket
    if name == "b" and np.ptp(terminal) <= 1e-12 * max(1.0, float(np.max(np.abs(terminal)))):
        return ExponentReport("b", cap, np.inf, cap, Backend.MC.value,
                              rationale=f"bracket is deterministic (<M>_T = {terminal[0]:.6g}); exponent is +inf")
    barrier = stop_rule.level if stop_rule is not None else 1.0
    probes = probes_from_samples(data.samples, data.censored, data.step_sigma, barrier, settings, seed)
    if not probes:
        return _tree_exponent(name, cap)
    coefficient = (lambda b: 0.5 * b * b) if name == "b" else (lambda a: a)
    return bisect_exponent(name, probes, coefficient, cap, tol)


def estimate_b(m: Martingale, cap: Optional[float] = None, tol: Optional[float] = None,
               channel: str = "M", bracket_channel: str = "bracket", stop_rule: Optional[BarrierRule] = None,
               settings: Optional[ExponentSettings] = None, seed: int = 0) -> ExponentReport:
    """b(M): sup of b with sup_tau ess-sup E[exp(b²/2 (<M>_T - <M>_tau)) | F_tau] finite"""
    settings = settings or ExponentSettings()
    cap = settings.cap if cap is None else cap
    tol = settings.bisection_tol if tol is None else tol
    if isinstance(m, TreeMartingale):
        return _tree_exponent("b", cap)
    data = exponent_samples(m, "b", channel, bracket_channel, stop_rule)
    return exponent_from_samples("b", data, stop_rule, settings, cap, tol, seed)


def estimate_a(m: Martingale, cap: Optional[float] = None, tol: Optional[float] = None,
               channel: str = "M", stop_rule: Optional[BarrierRule] = None,
               settings: Optional[ExponentSettings] = None, seed: int = 0) -> ExponentReport:
    """a(M): sup of a with sup_tau ess-sup E[exp(a |M_T - M_tau|) | F_tau] finite"""
    settings = settings or ExponentSettings()
    cap = settings.cap if cap is None else cap
    tol = settings.bisection_tol if tol is None else tol
    if isinstance(m, TreeMartingale):
        return _tree_exponent("a", cap)
    if not m.has_channel("bracket"):
        m = m.with_channel("bracket", np.zeros((m.n_paths, m.grid.steps + 1)))
    data = exponent_samples(m, "a", channel, "bracket", stop_rule)
    return exponent_from_samples("a", data, stop_rule, settings, cap, tol, seed)


def estimate_exponent_streamed(name: str, spec: MartingaleSpec, grid: TimeGrid, n_paths: int, seed: int,
                               settings: Optional[ExponentSettings] = None,
                               mc_settings: Optional[MonteCarloSettings] = None,
                               cap: Optional[float] = None, tol: Optional[float] = None) -> ExponentReport:
    """estimate_a / estimate_b on paths simulated and reduced block by block.

    Only the per-path probe variables survive a block, so path counts far beyond
    what a full ensemble fits in memory are usable. The probe family needs the
    spec's stop rule, which fixes the hitting levels for every block alike.
    """
    if spec.stop_rule is None:
        raise ConfigurationError(f"block-wise exponent estimation needs a stopped spec; '{spec.name}' has no stop rule")
    settings = settings or ExponentSettings()
    cap = settings.cap if cap is None else cap
    tol = settings.bisection_tol if tol is None else tol
    mc_settings = mc_settings or MonteCarloSettings()
    mc_settings = replace(mc_settings, block_size=min(mc_settings.block_size, settings.block_size))
    parts = PathSimulator(mc_settings).map_blocks(
        spec, grid, n_paths, seed, lambda block: exponent_samples(block, name, stop_rule=spec.stop_rule))
    data = ExponentSamples.concatenate(parts)
    logger.info(f"{name}(M) samples from {n_paths} paths in {len(parts)} blocks, {grid.steps} steps")
    return exponent_from_samples(name, data, spec.stop_rule, settings, cap, tol, seed)

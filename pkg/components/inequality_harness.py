"""
Inequality Harness
Verifiers for the martingale inequalities behind the BMO toolkit, run over seeded tree corpora
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from components.bmo_analytics import bmo_value, norm_hp, norm_rp
from components.errors import ConfigurationError, EmptyEnsembleError, UnknownScenarioError
from components.filtration_tree import (
    CorpusMember,
    TreeMartingale,
    TreeProcess,
    conditional_expectation,
    covariation,
    random_martingale,
    random_predictable,
    seeded_corpus,
    step_covariation,
    stochastic_integral,
    tree_from_document,
)

logger = logging.getLogger(__name__)

TREE_TOL = 1e-10
SQRT2 = float(np.sqrt(2.0))


@dataclass
class InequalityReport:
    name: str
    lhs: float
    rhs: float
    ratio: float
    passed: bool
    tol: float = TREE_TOL
    corpus_id: str = ""
    backend: str = "tree"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "ratio": self.ratio, "pass": self.passed,
                "tol": self.tol, "corpus_id": self.corpus_id, "backend": self.backend, "metadata": self.metadata}


def make_report(name: str, lhs: float, rhs: float, tol: float = TREE_TOL, **metadata) -> InequalityReport:
    """pass iff lhs <= rhs * (1 + tol); ratio is 0 for 0 <= 0"""
    lhs, rhs = float(lhs), float(rhs)
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0 else np.inf
    return InequalityReport(name, lhs, rhs, ratio, bool(lhs <= rhs * (1.0 + tol)), tol, metadata=metadata)


def _path_increments(m: TreeMartingale) -> np.ndarray:
    return np.diff(m.base.along_paths(), axis=1)


def _conjugate_exponent(p: float) -> float:
    return np.inf if p == 1.0 else p / (p - 1.0)


def verify_kunita_watanabe(X: TreeMartingale, Y: TreeMartingale, H: TreeProcess, K: TreeProcess,
                           p: float = 2.0, tol: float = TREE_TOL) -> InequalityReport:
    """∫|H||K||d[X,Y]| <= (∫H² d[X])^{1/2} (∫K² d[Y])^{1/2} on every path, plus the Hölder form in L^p x L^q"""
    tree = X.tree
    dx, dy = _path_increments(X), _path_increments(Y)
    h = np.abs(H.predictable().along_paths())
    k = np.abs(K.predictable().along_paths())
    lhs_path = np.sum(h * k * np.abs(dx * dy), axis=1)
    hx = np.sqrt(np.sum(h ** 2 * np.abs(dx) ** 2, axis=1))
    ky = np.sqrt(np.sum(k ** 2 * np.abs(dy) ** 2, axis=1))
    rhs_path = hx * ky
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rhs_path > 0, lhs_path / rhs_path, np.where(lhs_path > 0, np.inf, 0.0))
    worst = int(np.argmax(ratios))
    q = _conjugate_exponent(p)
    lhs_e = float(tree.expectation(lhs_path))
    rhs_e = _lp(tree, hx, p) * _lp(tree, ky, q)
    holder = make_report("kunita_watanabe_holder", lhs_e, rhs_e, tol)
    report = make_report("kunita_watanabe", lhs_path[worst], rhs_path[worst], tol,
                         worst_leaf=worst, p=p, holder=holder.to_dict())
    report.passed = bool(np.all(lhs_path <= rhs_path * (1.0 + tol)) and holder.passed)
    return report


def _lp(tree, leaves: np.ndarray, p: float) -> float:
    leaves = np.abs(leaves)
    if np.isinf(p):
        return float(np.max(leaves))
    return float(tree.expectation(leaves ** p) ** (1.0 / p))


def verify_fefferman(X: TreeMartingale, Y: TreeMartingale, tol: float = TREE_TOL) -> InequalityReport:
    """Σ_k E|E[dX dY | F_k]| <= √2 ‖X‖_{H^1} ‖Y‖_BMO"""
    tree = X.tree
    steps = step_covariation(X, Y)
    lhs = sum(float(np.dot(tree.node_probabilities(k), np.abs(steps.values[k]))) for k in range(tree.depth))
    rhs = SQRT2 * norm_hp(X, 1.0).value * bmo_value(Y)
    return make_report("fefferman", lhs, rhs, tol)


def verify_emery(X: TreeProcess, M: TreeMartingale, p: float = 2.0, tol: float = TREE_TOL) -> InequalityReport:
    """‖X∘M‖_{H^p} <= c ‖X‖_{R^p} ‖M‖_BMO with c = √2 for p > 1 and c = 1 for p = 1"""
    integral = stochastic_integral(X, M)
    constant = 1.0 if p == 1.0 else SQRT2
    lhs = norm_hp(integral, p).value
    rhs = constant * norm_rp(X, p).value * bmo_value(M)
    return make_report("emery", lhs, rhs, tol, p=p, constant=constant)


def verify_lp_bracket(X: TreeMartingale, M: TreeMartingale, p: float = 2.0,
                      tol: float = TREE_TOL) -> InequalityReport:
    """‖∫|d<X,M>|‖_{L^p} <= √2 p ‖X‖_{H^p} ‖M‖_BMO"""
    tree = X.tree
    steps = step_covariation(X, M)
    variation = np.zeros(1)
    for k in range(tree.depth):
        variation = tree.expand(variation + np.abs(steps.values[k]))
    lhs = _lp(tree, variation, p)
    rhs = SQRT2 * p * norm_hp(X, p).value * bmo_value(M)
    return make_report("lp_bracket", lhs, rhs, tol, p=p)


def verify_linfty_bracket(X: TreeMartingale, M: TreeMartingale, tol: float = TREE_TOL) -> InequalityReport:
    """BMO norm of t -> E[<X,M>_T | F_t] <= √2 ‖X‖_BMO ‖M‖_BMO"""
    terminal = np.real(covariation(X, M).terminal)
    closing = TreeMartingale(conditional_expectation(terminal, tree=X.tree))
    lhs = bmo_value(closing)
    rhs = SQRT2 * bmo_value(X) * bmo_value(M)
    return make_report("linfty_bracket", lhs, rhs, tol)


def verify_rinf_bmo(X: TreeProcess, M: TreeMartingale, tol: float = TREE_TOL) -> InequalityReport:
    """‖X∘M‖_BMO <= ‖X‖_{R^∞} ‖M‖_BMO"""
    lhs = bmo_value(stochastic_integral(X, M))
    rhs = norm_rp(X, np.inf).value * bmo_value(M)
    return make_report("rinf_bmo", lhs, rhs, tol)


@dataclass
class BDGEstimate:
    p: float
    c_hat: float
    C_hat: float
    ratios: List[float]
    doob_passed: bool
    corpus_size: int

    def to_dict(self) -> Dict[str, Any]:
        return {"p": self.p, "c_hat": self.c_hat, "C_hat": self.C_hat, "doob_passed": self.doob_passed,
                "corpus_size": self.corpus_size, "ratio_min": self.c_hat, "ratio_max": self.C_hat}


def estimate_bdg_constants(p: float, corpus: Sequence[TreeMartingale]) -> BDGEstimate:
    """Empirical extremes of ‖M‖_{R^p} / ‖M‖_{H^p} over a corpus, with Doob's L² check"""
    ratios, doob = [], True
    for m in corpus:
        m0 = m.minus_initial()
        hp = norm_hp(m0, p).value
        if hp <= 0:
            continue
        ratios.append(norm_rp(m0, p).value / hp)
        terminal_l2 = _lp(m0.tree, m0.terminal, 2.0)
        doob &= norm_rp(m0, 2.0).value <= 2.0 * terminal_l2 * (1.0 + TREE_TOL)
    if not ratios:
        raise EmptyEnsembleError("BDG estimation needs at least one non-constant martingale")
    return BDGEstimate(p, float(min(ratios)), float(max(ratios)), ratios, bool(doob), len(ratios))


def duality_lower_bound(X: TreeMartingale, probes: Sequence[TreeMartingale],
                        tol: float = TREE_TOL) -> InequalityReport:
    """max over BMO-normalized probes of E[<X,Y>_T], against the Fefferman ceiling √2 ‖X‖_{H^1}.

    The achieved fraction of ‖X‖_{H^1} is recorded; the duality sup lies between
    ‖X‖_{H^1} and √2 ‖X‖_{H^1}.
    """
    tree = X.tree
    best = 0.0
    for Y in probes:
        norm = bmo_value(Y)
        if norm <= 0:
            continue
        pairing = float(tree.expectation(np.real(covariation(X, Y.scaled(1.0 / norm)).terminal)))
        best = max(best, pairing)
    h1 = norm_hp(X, 1.0).value
    fraction = best / h1 if h1 > 0 else 0.0
    return make_report("duality", best, SQRT2 * h1, tol, h1=h1, fraction=fraction, probes=len(probes))


def duality_probes(X: TreeMartingale, rng: np.random.Generator, n: int = 64) -> List[TreeMartingale]:
    """The self-probe plus random martingales on the same tree"""
    return [X] + [random_martingale(X.tree, rng) for _ in range(n)]


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

_SEEDED = re.compile(r"^seeded:\{(?P<body>[^}]*)\}$")


def parse_corpus(spec: str, seed: int = 0) -> List[CorpusMember]:
    """'seeded:{n:100,depth:4,branching:2}' or a JSON file holding one tree document or a list of them"""
    match = _SEEDED.match(spec.strip())
    if match:
        params: Dict[str, Any] = {"n": 100, "depth": 4, "branching": 2, "generator": "random"}
        for item in filter(None, (part.strip() for part in match.group("body").split(","))):
            key, _, value = item.partition(":")
            params[key.strip()] = value.strip() if key.strip() == "generator" else int(value)
        return seeded_corpus(params["n"], params["depth"], params["branching"], seed, params["generator"])
    path = Path(spec)
    if not path.exists():
        raise ConfigurationError(f"corpus '{spec}' is neither seeded:{{...}} nor an existing file")
    docs = json.loads(path.read_text())
    docs = docs if isinstance(docs, list) else [docs]
    members = []
    for i, doc in enumerate(docs):
        tree, m = tree_from_document(doc)
        if m is None:
            m = random_martingale(tree, np.random.default_rng(np.random.SeedSequence([seed, i])))
        members.append(CorpusMember(f"{path.stem}-{i}", tree, m))
    return members


def _member_rng(member_index: int, seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, member_index]))


def _kw(member: CorpusMember, rng, p) -> InequalityReport:
    Y = random_martingale(member.tree, rng)
    H, K = random_predictable(member.tree, rng), random_predictable(member.tree, rng)
    return verify_kunita_watanabe(member.martingale, Y, H, K, p)


def _fefferman(member, rng, p):
    return verify_fefferman(member.martingale, random_martingale(member.tree, rng))


def _emery(member, rng, p):
    return verify_emery(member.martingale.base.running_max(), member.martingale, p)


def _lp_bracket(member, rng, p):
    return verify_lp_bracket(random_martingale(member.tree, rng), member.martingale, p)


def _linfty(member, rng, p):
    return verify_linfty_bracket(random_martingale(member.tree, rng), member.martingale)


def _rinf(member, rng, p):
    return verify_rinf_bmo(random_predictable(member.tree, rng), member.martingale)


def _duality(member, rng, p):
    return duality_lower_bound(member.martingale, duality_probes(member.martingale, rng))


INEQUALITIES: Dict[str, Callable[[CorpusMember, np.random.Generator, float], InequalityReport]] = {
    "kunita-watanabe": _kw,
    "fefferman": _fefferman,
    "emery": _emery,
    "lp-bracket": _lp_bracket,
    "linfty-bracket": _linfty,
    "rinf-bmo": _rinf,
    "duality": _duality,
}


def run_corpus(name: str, corpus: Sequence[CorpusMember], p: float = 2.0, seed: int = 0) -> List[InequalityReport]:
    """Run one verifier over every corpus member with member-specific random partners"""
    if name not in INEQUALITIES:
        raise UnknownScenarioError(name, list(INEQUALITIES))
    if not corpus:
        raise EmptyEnsembleError("empty corpus")
    reports = []
    for i, member in enumerate(corpus):
        report = INEQUALITIES[name](member, _member_rng(i, seed), p)
        report.corpus_id = member.corpus_id
        reports.append(report)
    failed = sum(1 for r in reports if not r.passed)
    max_ratio = max(r.ratio for r in reports)
    logger.info(f"{name}: {len(reports) - failed}/{len(reports)} passed, max ratio {max_ratio:.4f}")
    if failed:
        logger.error(f"{name}: {failed} corpus members violate the inequality")
    return reports


def summarize(reports: Sequence[InequalityReport]) -> Dict[str, Any]:
    ratios = [r.ratio for r in reports]
    return {"count": len(reports), "passed": sum(r.passed for r in reports),
            "max_ratio": float(max(ratios)) if ratios else 0.0,
            "mean_ratio": float(np.mean(ratios)) if ratios else 0.0}

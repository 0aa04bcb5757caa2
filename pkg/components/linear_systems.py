"""
Linear Systems
Fundamental solution matrices, explicit linear BSDE and SDE solutions, Girsanov transforms and reverse Hölder probes
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from components.bmo_analytics import (
    NormReport,
    bmo_value,
    node_conditional,
    norm_hp,
    norm_lp,
    norm_rp,
    reverse_holder_constant,
)
from components.errors import NonPositiveDensityError, NotMartingaleError, ShapeMismatchError, SingularFactorError
from components.filtration_tree import (
    CorpusMember,
    ProcessKind,
    TreeFiltration,
    TreeMartingale,
    TreeProcess,
    TreeStoppingTime,
    conditional_expectation,
    covariation,
    kw_decompose,
    random_martingale,
    random_predictable,
    random_tree,
    step_covariation,
    stochastic_integral,
)
from components.se_bsde_solvers import BSDESpec, constant_envelope
from config.lab_config import Backend, NormName

logger = logging.getLogger(__name__)

SINGULAR_DETERMINANT = 1e-14
IDENTITY_TOL = 1e-10


def as_matrix_process(process: Optional[TreeProcess], tree: TreeFiltration, n: int) -> TreeProcess:
    """Predictable (n, n) coefficient; scalars become 1x1 matrices, None becomes zero"""
    if process is None:
        return TreeProcess.constant(tree, np.zeros((n, n)), ProcessKind.PREDICTABLE)
    process = process.predictable()
    if process.shape == ():
        if n != 1:
            raise ShapeMismatchError(f"scalar coefficient for an n={n} system")
        return process.map(lambda v: v.reshape(-1, 1, 1))
    if process.shape != (n, n):
        raise ShapeMismatchError(f"coefficient entries have shape {process.shape}, expected {(n, n)}")
    return process


def _matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-node a @ x for vector or matrix x"""
    return np.einsum("jab,jb...->ja...", a, x)


def _transpose(values: np.ndarray) -> np.ndarray:
    return np.swapaxes(values, -1, -2)


@dataclass
class FundamentalSolution:
    """S(0) = I, S(next) = (I + A Δ<N1,N2> + B Δ<M> + D ΔM) S, with per-node inverses"""
    S: TreeProcess
    S_inv: TreeProcess
    factors: Tuple[np.ndarray, ...]
    M: TreeMartingale
    D: TreeProcess
    A: TreeProcess
    B: TreeProcess
    dcov: Tuple[np.ndarray, ...] = ()
    matrix_norm: str = "operator-2"

    @property
    def tree(self) -> TreeFiltration:
        return self.S.tree

    @property
    def n(self) -> int:
        return self.S.shape[0]

    def transposed(self) -> TreeProcess:
        return self.S.map(_transpose)

    def transposed_inverse(self) -> TreeProcess:
        return self.S_inv.map(_transpose)

    def identity_gap(self) -> float:
        eye = np.eye(self.n)
        return float(max(np.max(np.abs(s @ si - eye)) for s, si in zip(self.S.values, self.S_inv.values)))

    def recursion_gap(self) -> float:
        tree = self.tree
        return float(max(np.max(np.abs(self.S.values[k + 1] - self.factors[k] @ tree.expand(self.S.values[k])))
                         for k in range(tree.depth)))

    def transition(self, s: int) -> TreeProcess:
        """S(t, s) for t >= s: product of one-step factors on (s, t]; levels below s hold I"""
        tree = self.tree
        eye = np.eye(self.n)
        levels = [np.broadcast_to(eye, (tree.level_size(k), self.n, self.n)).copy() for k in range(s + 1)]
        for k in range(s, tree.depth):
            levels.append(self.factors[k] @ tree.expand(levels[-1]))
        return TreeProcess(tree, tuple(levels))

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "depth": self.tree.depth, "matrix_norm": self.matrix_norm,
                "identity_gap": self.identity_gap(), "recursion_gap": self.recursion_gap(),
                "S_T": [m.tolist() for m in self.S.terminal]}


def fundamental(tree: TreeFiltration, M: TreeMartingale, D: Optional[TreeProcess] = None,
                A: Optional[TreeProcess] = None, N1: Optional[TreeMartingale] = None,
                N2: Optional[TreeMartingale] = None, B: Optional[TreeProcess] = None,
                n: Optional[int] = None) -> FundamentalSolution:
    if n is None:
        shapes = [p.shape for p in (D, A, B) if p is not None and p.shape]
        n = shapes[0][0] if shapes else 1
    D_m, A_m, B_m = (as_matrix_process(p, tree, n) for p in (D, A, B))
    if (N1 is None) != (N2 is None):
        raise ShapeMismatchError("N1 and N2 come together")
    dcov = step_covariation(N1, N2).values if N1 is not None else [np.zeros(tree.level_size(k))
                                                                    for k in range(tree.depth)]
    dbr = M.step_bracket.values
    eye = np.eye(n)
    S = [eye[None].copy()]
    S_inv = [eye[None].copy()]
    factors = []
    for k in range(tree.depth):
        base = eye + A_m.values[k] * np.real(dcov[k])[:, None, None] + B_m.values[k] * dbr[k][:, None, None]
        dm = M.increments[k].reshape(-1)
        factor = tree.expand(base) + tree.expand(D_m.values[k]) * dm[:, None, None]
        det = np.abs(np.linalg.det(factor))
        if np.any(det <= SINGULAR_DETERMINANT):
            child = int(np.argmax(det <= SINGULAR_DETERMINANT))
            raise SingularFactorError((k, child // tree.branching),
                                      f"one-step factor towards child {(k + 1, child)} has |det| {det[child]:.2e}")
        factors.append(factor)
        S.append(factor @ tree.expand(S[-1]))
        try:
            S_inv.append(np.linalg.inv(S[-1]))
        except np.linalg.LinAlgError:
            raise SingularFactorError((k + 1, 0), "accumulated product not invertible")
    fs = FundamentalSolution(TreeProcess(tree, tuple(S)), TreeProcess(tree, tuple(S_inv)), tuple(factors),
                             M, D_m, A_m, B_m, tuple(np.real(c) for c in dcov))
    logger.debug(f"fundamental solution n={n}: identity gap {fs.identity_gap():.2e}")
    return fs


def inverse_sde_gap(fs: FundamentalSolution) -> float:
    """Max gap between the exact per-node inverse and the continuous-time inverse recursion.

    The recursion uses the pathwise squared increment for d<M>; the gap is third
    order in the driver scale per step.
    """
    tree = fs.tree
    eye = np.eye(fs.n)
    dbr = fs.M.step_bracket.values
    approx = fs.S_inv.values[0]
    gap = 0.0
    for k in range(tree.depth):
        dm = fs.M.increments[k].reshape(-1)[:, None, None]
        D = tree.expand(fs.D.values[k])
        drift = tree.expand(fs.B.values[k] * dbr[k][:, None, None] + fs.A.values[k] * fs.dcov[k][:, None, None])
        step = eye - D * dm + (D @ D) * dm ** 2 - drift
        approx = tree.expand(approx) @ step
        gap = max(gap, float(np.max(np.abs(approx - fs.S_inv.values[k + 1]))))
    return gap


def fundamental_rp_values(fs: FundamentalSolution, p: float) -> List[np.ndarray]:
    """Per node v: E[max_{t >= t(v)} |S(v)^{-1} S(t)|^p | v]"""
    tree = fs.tree
    paths = tree.path_nodes
    out = []
    for k in range(tree.depth + 1):
        start_inv = fs.S_inv.values[k][paths[:, k]]
        running = np.zeros(tree.n_leaves)
        for t in range(k, tree.depth + 1):
            rel = start_inv @ fs.S.values[t][paths[:, t]]
            running = np.maximum(running, np.linalg.norm(rel, ord=2, axis=(1, 2)))
        out.append(node_conditional(tree, k, running ** p))
    return out


def check_fundamental_rp(fs: FundamentalSolution, p: float) -> NormReport:
    values = fundamental_rp_values(fs, p)
    k = int(np.argmax([np.max(v) for v in values]))
    j = int(np.argmax(values[k]))
    return NormReport(NormName.REVERSE_HOLDER.value, p, float(values[k][j]), Backend.TREE.value, None,
                      {"argmax_node": [k, j], "quantity": "K_p^p", "matrix_norm": fs.matrix_norm})


# ---------------------------------------------------------------------------
# Linear BSDE
# ---------------------------------------------------------------------------

def _time_sum(tree: TreeFiltration, weights: TreeProcess, f: TreeProcess) -> TreeProcess:
    """G_k = sum_{j<k} weights_j f_j dt (adapted, G_0 = 0)"""
    levels = [np.zeros((1,) + f.shape)]
    for k in range(tree.depth):
        levels.append(tree.expand(levels[-1] + _matvec(weights.values[k], f.values[k]) * tree.dt))
    return TreeProcess(tree, tuple(levels))


def _as_vector_leaves(xi: np.ndarray, n: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    return xi.reshape(-1, 1) if xi.ndim == 1 and n == 1 else xi


def solve_linear_bsde_explicit(A: Optional[TreeProcess], M: TreeMartingale, xi: np.ndarray,
                               f: Optional[TreeProcess], tree: TreeFiltration
                               ) -> Tuple[TreeProcess, TreeProcess, TreeMartingale]:
    """Y = ξ + ∫ (Aᵀ Z d<M> + f dt) - ∫ Z dM - M^⊥ through the fundamental solution of (A, M).

    Y, Z and M^⊥ carry vector entries of length n even when n = 1.
    """
    n = A.shape[0] if A is not None and A.shape else 1
    xi = _as_vector_leaves(xi, n)
    f = f.predictable() if f is not None else TreeProcess.constant(tree, np.zeros(n), ProcessKind.PREDICTABLE)
    if f.shape == ():
        f = f.map(lambda v: v.reshape(-1, 1))
    fs = fundamental(tree, M, D=A, n=n)
    St, St_inv = fs.transposed(), fs.transposed_inverse()
    G = _time_sum(tree, St.predictable(), f)
    X = TreeMartingale(conditional_expectation(_matvec(St.terminal, xi) + G.terminal, tree=tree))
    Y = TreeProcess(tree, tuple(_matvec(St_inv.values[k], X.values[k] - G.values[k])
                                for k in range(tree.depth + 1)))
    z = kw_decompose(X, M).z
    dbr = M.step_bracket.values
    Z_levels, perp = [], []
    for k in range(tree.depth):
        dm = M.increments[k]
        y_next = Y.values[k + 1].reshape((tree.level_size(k), tree.branching, n))
        weighted = np.einsum("jb,jba->ja", tree.probabilities[k] * dm ** 2, y_next)
        safe = np.where(dbr[k] > 0, dbr[k], 1.0)[:, None]
        correction = _matvec(_transpose(fs.D.values[k]), weighted / safe)
        Zk = np.where((dbr[k] > 0)[:, None], _matvec(St_inv.values[k], z.values[k]) - correction, 0.0)
        Z_levels.append(Zk)
        centred = y_next - tree.average(Y.values[k + 1], k)[:, None]
        perp.append(centred - Zk[:, None] * dm[:, :, None])
    Z = TreeProcess(tree, tuple(Z_levels), ProcessKind.PREDICTABLE)
    M_perp = TreeMartingale.from_increments(tree, perp, np.zeros(n))
    return Y, Z, M_perp


def linear_bsde_residual(A: Optional[TreeProcess], M: TreeMartingale, xi: np.ndarray, f: Optional[TreeProcess],
                         Y: TreeProcess, Z: TreeProcess, M_perp: TreeMartingale) -> float:
    """Node-wise residual of Y_k = Y_{k+1} + f_k dt + A_kᵀ Z_k Δ<M>_k - Z_k ΔM_k - ΔM^⊥_k"""
    tree = Y.tree
    n = Y.shape[0]
    A_m = as_matrix_process(A, tree, n)
    f_vals = f.predictable() if f is not None else TreeProcess.constant(tree, np.zeros(n), ProcessKind.PREDICTABLE)
    if f_vals.shape == ():
        f_vals = f_vals.map(lambda v: v.reshape(-1, 1))
    dbr = M.step_bracket.values
    worst = float(np.max(np.abs(Y.terminal - _as_vector_leaves(xi, n))))
    for k in range(tree.depth):
        drive = f_vals.values[k] * tree.dt + _matvec(_transpose(A_m.values[k]), Z.values[k]) * dbr[k][:, None]
        dm = M.increments[k].reshape(-1)[:, None]
        rhs = (Y.values[k + 1] + tree.expand(drive) - tree.expand(Z.values[k]) * dm
               - M_perp.increments[k].reshape(-1, n))
        worst = max(worst, float(np.max(np.abs(tree.expand(Y.values[k]) - rhs))))
    return worst


def equivalent_bsde_spec(A: Optional[TreeProcess], M: TreeMartingale, xi: np.ndarray,
                         f: Optional[TreeProcess], tree: TreeFiltration) -> BSDESpec:
    """The same linear BSDE as a Picard problem: g(y, z) = Aᵀz and J = sum f dt"""
    n = A.shape[0] if A is not None and A.shape else 1
    A_m = as_matrix_process(A, tree, n)
    f_vals = f.predictable() if f is not None else TreeProcess.constant(tree, np.zeros(n), ProcessKind.PREDICTABLE)
    if f_vals.shape == ():
        f_vals = f_vals.map(lambda v: v.reshape(-1, 1))
    J = _time_sum(tree, TreeProcess.constant(tree, np.eye(n), ProcessKind.PREDICTABLE), f_vals)
    gamma = TreeProcess(tree, tuple(np.linalg.norm(a, ord=2, axis=(1, 2)) for a in A_m.values),
                        ProcessKind.PREDICTABLE)

    def zero_f(k, y):
        return np.zeros_like(y)

    def linear_g(k, y, z):
        return _matvec(_transpose(A_m.values[k]), z)

    return BSDESpec(tree, _as_vector_leaves(xi, n), J, zero_f, linear_g, constant_envelope(tree, 0.0),
                    constant_envelope(tree, 0.0), gamma, M, M, M, name="linear-bsde")


# ---------------------------------------------------------------------------
# Girsanov
# ---------------------------------------------------------------------------

@dataclass
class GirsanovRecord:
    density: TreeProcess
    q_tree: TreeFiltration
    transformed: Dict[str, TreeMartingale]
    audit_gap: float
    bmo_q: Dict[str, float] = field(default_factory=dict)

    def expectation_q(self, leaf_values: np.ndarray) -> Any:
        return self.q_tree.expectation(leaf_values)

    def to_dict(self) -> Dict[str, Any]:
        return {"audit_gap": self.audit_gap, "bmo_q": self.bmo_q,
                "density_range": [float(min(np.min(v) for v in self.density.values)),
                                  float(max(np.max(v) for v in self.density.values))]}


def girsanov(A: TreeProcess, M: TreeMartingale, targets: Optional[Dict[str, TreeMartingale]] = None
             ) -> GirsanovRecord:
    """Tilt by the discrete exponential of A∘M and move each target V to V - <A∘M, V>"""
    tree = M.tree
    a = A.predictable()
    if a.shape not in ((), (1, 1)):
        raise ShapeMismatchError("Girsanov tilts by a scalar integrand")
    a = a.map(lambda v: v.reshape(-1))
    density = [np.ones(1)]
    q_probs = []
    for k in range(tree.depth):
        factor = 1.0 + a.values[k][:, None] * M.increments[k]
        if np.any(factor <= 0):
            j, b = (int(i) for i in np.argwhere(factor <= 0)[0])
            raise NonPositiveDensityError((k + 1, j * tree.branching + b), float(factor[j, b]))
        tilted = tree.probabilities[k] * factor
        q_probs.append(tilted / tilted.sum(axis=1, keepdims=True))
        density.append(tree.expand(density[-1]) * factor.reshape(-1))
    q_tree = TreeFiltration(tree.depth, tree.branching, tuple(q_probs), tree.dt)
    AM = stochastic_integral(a, M)
    transformed: Dict[str, TreeMartingale] = {}
    bmo_q: Dict[str, float] = {}
    gap = 0.0
    for name, V in {"M": M, **(targets or {})}.items():
        shifted = (V.base - covariation(AM, V)).values
        qm = TreeMartingale(TreeProcess(q_tree, shifted), tol=1e-10)
        for k in range(tree.depth):
            gap = max(gap, float(np.max(np.abs(q_tree.average(shifted[k + 1], k) - shifted[k]))))
        transformed[name] = qm
        if qm.shape == ():
            bmo_q[name] = bmo_value(qm)
    return GirsanovRecord(TreeProcess(tree, tuple(density)), q_tree, transformed, gap, bmo_q)


def bmo_data_report(A: TreeProcess, M: TreeMartingale, xi: np.ndarray) -> Dict[str, float]:
    """Bounded ξ, f = 0: BMO norm of the martingale part under P and Q against ‖ξ‖_∞"""
    tree = M.tree
    Y, Z, M_perp = solve_linear_bsde_explicit(A, M, xi, None, tree)
    U = stochastic_integral(Z, M) + M_perp
    record = girsanov(A, M)
    closed_q = TreeMartingale(conditional_expectation(np.asarray(xi, float).reshape(-1), tree=record.q_tree))
    xi_sup = float(np.max(np.abs(xi)))
    bmo_p, bmo_q = bmo_value(U), bmo_value(closed_q)
    return {"xi_sup": xi_sup, "bmo_p": bmo_p, "bmo_q": bmo_q,
            "ratio_p": bmo_p / xi_sup if xi_sup > 0 else 0.0,
            "ratio_q": bmo_q / xi_sup if xi_sup > 0 else 0.0}


# ---------------------------------------------------------------------------
# Linear SDE and reverse Hölder probes
# ---------------------------------------------------------------------------


@dataclass
class LinearSDEReport:
    residual: float
    left_point_gap: float
    rp_norm: float
    hp_norm: Optional[float]
    p: float

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def solve_linear_sde(A: Optional[TreeProcess], M: TreeMartingale, V: TreeProcess,
                     p: float = 2.0) -> Tuple[TreeProcess, LinearSDEReport]:
    """X = S(t) Σ S(s+1)^{-1} ΔV_s, the solution of X_{k+1} = X_k + A X_k ΔM + ΔV with X_0 = 0.

    V entries may be vectors (n,) or matrices (n, n). The left-point form
    S(t) Σ S(s)^{-1} ΔV^Q_s with V^Q = V - <A∘M, V> is reported as a gap.
    """
    tree = M.tree
    scalar = V.shape == ()
    if scalar:
        V = V.map(lambda v: v.reshape(-1, 1))
    n = V.shape[0]
    fs = fundamental(tree, M, D=A, n=n)
    exact = [np.zeros((1,) + V.shape)]
    left = [np.zeros((1,) + V.shape)]
    for k in range(tree.depth):
        dV = V.values[k + 1] - tree.expand(V.values[k])
        exact.append(tree.expand(exact[-1]) + _matvec(fs.S_inv.values[k + 1], dV))
        grouped = dV.reshape((tree.level_size(k), tree.branching) + V.shape)
        cov = np.einsum("jb,jb...->j...", tree.probabilities[k] * M.increments[k], grouped)
        dVq = dV - tree.expand(_matvec(fs.D.values[k], cov))
        left.append(tree.expand(left[-1]) + _matvec(tree.expand(fs.S_inv.values[k]), dVq))
    X = TreeProcess(tree, tuple(_matvec(fs.S.values[k], exact[k]) for k in range(tree.depth + 1)))
    X_left = TreeProcess(tree, tuple(_matvec(fs.S.values[k], left[k]) for k in range(tree.depth + 1)))
    residual = 0.0
    for k in range(tree.depth):
        dV = V.values[k + 1] - tree.expand(V.values[k])
        expected = _matvec(fs.factors[k], tree.expand(X.values[k])) + dV
        residual = max(residual, float(np.max(np.abs(X.values[k + 1] - expected))))
    gap = float(max(np.max(np.abs(a - b)) for a, b in zip(X.values, X_left.values)))
    if scalar:
        X = X.map(lambda v: v.reshape(-1))
    hp = None
    try:
        hp = norm_hp(TreeMartingale(X, tol=1e-10), p).value
    except NotMartingaleError:
        logger.debug("V is not a martingale; the H^p norm of X is skipped")
    return X, LinearSDEReport(residual, gap, norm_rp(X, p).value, hp, p)


@dataclass
class RHIReport:
    identity_gap: float
    xt_lp: float
    v_hp: float
    ratio: float
    event_paths: int
    p: float
    tol: float = IDENTITY_TOL

    @property
    def passed(self) -> bool:
        return self.identity_gap <= self.tol

    def to_dict(self) -> Dict[str, Any]:
        return {**dict(vars(self)), "passed": self.passed}


def _event_window(sigma: TreeStoppingTime, event: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Per level, the nodes past sigma whose sigma-node lies in the event"""
    tree = sigma.tree
    window = [sigma.stops_at(0) & np.asarray(event[0], bool)]
    for k in range(1, tree.depth + 1):
        window.append(tree.expand(window[-1]) | (sigma.stops_at(k) & np.asarray(event[k], bool)))
    return window


def rhi_probe(A: TreeProcess, M: TreeMartingale, sigma: TreeStoppingTime, event: Sequence[np.ndarray],
              p: float = 2.0) -> RHIReport:
    """Solve dX = A X dM + dV with V = χ_[σ,T] χ_B A∘M and compare X_T with χ_B (S(T) S(σ)^{-1} - I)"""
    tree = M.tree
    n = A.shape[0] if A.shape else 1
    A_m = as_matrix_process(A, tree, n)
    window = _event_window(sigma, event)
    levels = [np.zeros((1, n, n))]
    for k in range(tree.depth):
        dm = M.increments[k].reshape(-1)[:, None, None]
        active = tree.expand(window[k])[:, None, None]
        levels.append(tree.expand(levels[-1]) + np.where(active, tree.expand(A_m.values[k]) * dm, 0.0))
    V = TreeProcess(tree, tuple(levels))
    X, _ = solve_linear_sde(A_m, M, V, p)
    fs = fundamental(tree, M, D=A_m, n=n)
    paths = tree.path_nodes
    stop = sigma.stop_levels()
    leaves = np.arange(tree.n_leaves)
    S_sigma_inv = np.stack([fs.S_inv.values[s][paths[l, s]] for l, s in zip(leaves, stop)])
    expected = np.where(window[tree.depth][:, None, None], fs.S.terminal @ S_sigma_inv - np.eye(n), 0.0)
    gap = float(np.max(np.abs(X.terminal - expected)))
    xt = norm_lp(tree, X.terminal, p).value
    vh = norm_hp(TreeMartingale(V), p).value
    return RHIReport(gap, xt, vh, xt / vh if vh > 0 else 0.0, int(window[tree.depth].sum()), p)


def random_sigma_event(tree: TreeFiltration, rng: np.random.Generator,
                       stop_rate: float = 0.3, event_rate: float = 0.5) -> Tuple[TreeStoppingTime, List[np.ndarray]]:
    flags = [rng.random(tree.level_size(k)) < stop_rate for k in range(tree.depth + 1)]
    flags[tree.depth][:] = True
    sigma = TreeStoppingTime(tree, tuple(flags))
    event = [rng.random(tree.level_size(k)) < event_rate for k in range(tree.depth + 1)]
    return sigma, event


def rhi_family(A: TreeProcess, M: TreeMartingale, rng: np.random.Generator, count: int = 20,
               p: float = 2.0) -> List[RHIReport]:
    return [rhi_probe(A, M, *random_sigma_event(M.tree, rng), p=p) for _ in range(count)]


def continuation_scan(S, p_grid: Sequence[float]) -> pd.DataFrame:
    """Reverse Hölder constants of S over a grid of exponents"""
    rows = []
    for p in sorted(p_grid):
        if isinstance(S, FundamentalSolution):
            value = check_fundamental_rp(S, p).value
        else:
            value = reverse_holder_constant(S, p).value
        rows.append({"p": p, "constant": value, "root": value ** (1.0 / p)})
    table = pd.DataFrame(rows)
    table["nondecreasing"] = table["constant"].diff().fillna(0.0) >= -1e-12
    return table


def linear_sde_h1_scan(corpus: Sequence[CorpusMember], seed: int = 0, a_scale: float = 0.5) -> pd.DataFrame:
    """H^1 norm of the n = 1 linear SDE solution on every corpus member"""
    rows = []
    for i, member in enumerate(corpus):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        A = random_predictable(member.tree, rng, -a_scale, a_scale)
        V = random_martingale(member.tree, rng).base
        _, report = solve_linear_sde(A, member.martingale, V, p=1.0)
        rows.append({"corpus_id": member.corpus_id, "h1": report.hp_norm, "residual": report.residual})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

BUNDLED_LINEAR_CASES: Dict[str, Dict[str, Any]] = {
    "scalar-small": {"depth": 4, "branching": 3, "generator": "random", "seed": 3, "scale": 0.3,
                     "a_scale": 0.5, "n": 1},
    "matrix-small": {"depth": 3, "branching": 2, "generator": "random", "seed": 9, "scale": 0.3,
                     "a_scale": 0.4, "n": 2},
}


@dataclass
class LinearCase:
    tree: TreeFiltration
    M: TreeMartingale
    A: TreeProcess
    xi: np.ndarray
    f: TreeProcess
    V: TreeProcess
    name: str = "linear"


def build_linear_case(doc: Dict[str, Any]) -> LinearCase:
    rng = np.random.default_rng(np.random.SeedSequence(int(doc.get("seed", 0))))
    tree = random_tree(rng, int(doc["depth"]), int(doc["branching"]), doc.get("generator", "random"))
    M = random_martingale(tree, rng, float(doc.get("scale", 0.3)))
    n = int(doc.get("n", 1))
    entry = () if n == 1 else (n,)
    a = float(doc.get("a_scale", 0.5))
    A = random_predictable(tree, rng, -a, a, () if n == 1 else (n, n))
    xi = rng.uniform(-1.0, 1.0, size=(tree.n_leaves,) + entry)
    f = random_predictable(tree, rng, -1.0, 1.0, entry)
    V = random_martingale(tree, rng, 1.0, entry).base
    return LinearCase(tree, M, A, xi, f, V, doc.get("name", "linear"))

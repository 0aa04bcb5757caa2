"""
Quadratic BSDE Counterexample
Explicit solution Y = -log(X + 2) of dY = Z dW + ½Z² dt, its verification and the exponential-moment blow-up of ∫Z²
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from components.bmo_analytics import DoublingDiagnostic, bmo_norm
from components.errors import ConfigurationError
from components.montecarlo_paths import (
    BarrierRule,
    PathEnsemble,
    PathSimulator,
    TimeGrid,
    bundled_spec,
    corrected_bracket,
    exit_time_mean,
    hit_time,
    integrate_paths,
)
from config.lab_config import (
    BarrierKind,
    CounterexampleSettings,
    ExponentSettings,
    MonteCarloSettings,
    Verdict,
)

logger = logging.getLogger(__name__)

BARRIER = BarrierRule(BarrierKind.ABS_ABOVE, 1.0)
FINITE_LIMIT = np.pi ** 2 / 8.0          # E[exp(λ∫Z²)] < ∞ below this
DIVERGENT_LIMIT = 9.0 * np.pi ** 2 / 8.0  # E[exp(λ∫Z²)] = ∞ from here on
MIN_K = 6


def counterexample_grid(k: int, step_offset: int = 3) -> TimeGrid:
    """Grid on [0, 1 - 2^-k] with step 2^-(k + step_offset)"""
    if k < MIN_K:
        raise ConfigurationError(f"counterexample grids need k >= {MIN_K}, got {k}")
    return TimeGrid.with_step(0.0, 1.0 - 2.0 ** -k, 2.0 ** -(k + step_offset))


def _solution_paths(ensemble: PathEnsemble) -> Dict[str, np.ndarray]:
    """Y, Z and the one-step residuals of the explicit solution on every path.

    X is the time-changed integral in channel M. Y = -log(X_{t∧τ} + 2) and
    Z = -1 / ((X + 2)√(1 - t)) before τ, 0 from τ on.
    """
    grid = ensemble.grid
    x, q, w = ensemble.channel("M"), ensemble.channel("bracket"), ensemble.brownian
    n, steps = ensemble.n_paths, grid.steps
    tau = hit_time(ensemble, "M", BARRIER)
    stop = tau.capped()
    rows = np.arange(n)
    idx = np.arange(steps + 1)[None, :]
    x_tau = x[rows, stop]
    x_stop = np.where(idx <= stop[:, None], x, x_tau[:, None])
    valid = x_stop.min(axis=1) > -2.0
    before = idx[:, :-1] < stop[:, None]
    t = grid.times()[:-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        y = -np.log(x_stop + 2.0)
        z = np.where(before, -1.0 / ((x[:, :-1] + 2.0) * np.sqrt(1.0 - t)), 0.0)
        residual = np.diff(y, axis=1) - z * np.diff(w, axis=1) - 0.5 * z * z * grid.dt
        identity = np.where(before, np.abs(np.abs(z) * np.sqrt(1.0 - t) * (x[:, :-1] + 2.0) - 1.0), 0.0)
        channel_z2 = np.sum(np.where(before, np.diff(q, axis=1) / (x[:, :-1] + 2.0) ** 2, 0.0), axis=1)
    return {"tau": tau.index, "stopped": tau.stopped, "stop": stop, "valid": valid, "x_tau": x_tau, "y": y,
            "z": z, "residual": residual, "identity": identity, "channel_z2": channel_z2, "before": before,
            "bracket_tau": q[rows, stop],
            "bracket_corrected": corrected_bracket(ensemble, tau, BARRIER.level)}


def _summarize(ensemble: PathEnsemble, keep_paths: bool) -> Dict[str, Any]:
    paths = _solution_paths(ensemble)
    residual, before, dt = paths["residual"], paths["before"], ensemble.grid.dt
    z = paths["z"]
    frame = pd.DataFrame({
        "tau_index": paths["tau"],
        "stopped": paths["stopped"],
        "valid": paths["valid"],
        "x_tau": paths["x_tau"],
        "xi": paths["y"][np.arange(ensemble.n_paths), paths["stop"]],
        "y_abs_max": np.max(np.abs(paths["y"]), axis=1),
        "bracket_tau": paths["bracket_tau"],
        "bracket_corrected": paths["bracket_corrected"],
        "z2_integral": np.sum(z * z, axis=1) * dt,
        "z2_channel": paths["channel_z2"],
        "overshoot": np.where(paths["stopped"], np.abs(paths["x_tau"]) - 1.0, 0.0),
        "residual": np.sum(residual, axis=1),
        "residual_after": np.max(np.where(before, 0.0, np.abs(residual)), axis=1),
        "first_residual": residual[:, 0],
        "z_identity_gap": np.max(paths["identity"], axis=1),
    })
    kept = None
    if keep_paths:
        z_full = np.concatenate([z, np.zeros((ensemble.n_paths, 1))], axis=1)
        zm = np.concatenate([np.zeros((ensemble.n_paths, 1)), np.cumsum(z * np.diff(ensemble.brownian, axis=1), axis=1)], axis=1)
        zq = np.concatenate([np.zeros((ensemble.n_paths, 1)), np.cumsum(z * z * dt, axis=1)], axis=1)
        kept = (ensemble.with_channel("Y", paths["y"]).with_channel("Z", z_full)
                .with_channel("ZM", zm).with_channel("ZM_bracket", zq))
    return {"frame": frame, "ensemble": kept}


@dataclass
class CounterexampleScenario:
    """Per-path summary of the explicit solution; full channels only when kept"""
    k: int
    grid: TimeGrid
    seed: int
    paths: pd.DataFrame
    ensemble: Optional[PathEnsemble] = None

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def stopped_fraction(self) -> float:
        return float(self.paths["stopped"].mean())

    @property
    def y0(self) -> float:
        return float(-np.log(2.0))

    def to_dict(self) -> Dict[str, Any]:
        stopped = self.paths[self.paths["stopped"]]
        return {"k": self.k, "dt": self.grid.dt, "steps": self.grid.steps, "t_end": self.grid.t_end,
                "seed": self.seed, "n_paths": self.n_paths, "stopped_fraction": self.stopped_fraction,
                "truncated_paths": int((~self.paths["stopped"]).sum()),
                "invalid_paths": int((~self.paths["valid"]).sum()), "y0": self.y0,
                "overshoot_max": float(stopped["overshoot"].max()) if len(stopped) else 0.0,
                "overshoot_q99": float(stopped["overshoot"].quantile(0.99)) if len(stopped) else 0.0}


def clock_horizon(grid: TimeGrid) -> float:
    """<X> at the last grid point, the discrete clock of 1/(1 - s) ds"""
    return float(np.sum(grid.dt / (1.0 - grid.times()[:-1])))


def _simulator(settings: CounterexampleSettings, mc_settings: Optional[MonteCarloSettings]) -> PathSimulator:
    mc_settings = mc_settings or MonteCarloSettings()
    return PathSimulator(replace(mc_settings, block_size=min(mc_settings.block_size, settings.block_size)))


def build_scenario(k: int, n_paths: int, seed: int, keep_paths: bool = False,
                   settings: Optional[CounterexampleSettings] = None,
                   mc_settings: Optional[MonteCarloSettings] = None) -> CounterexampleScenario:
    """Simulate X = ∫(1 - s)^{-1/2} dW on [0, 1 - 2^-k] and build τ, ξ, Y, Z block by block"""
    settings = settings or CounterexampleSettings()
    grid = counterexample_grid(k, settings.step_offset)
    spec = bundled_spec("time-change")
    blocks = _simulator(settings, mc_settings).map_blocks(spec, grid, n_paths, seed,
                                                          lambda block: _summarize(block, keep_paths))
    paths = pd.concat([b["frame"] for b in blocks], ignore_index=True)
    ensemble = PathEnsemble.concatenate([b["ensemble"] for b in blocks]) if keep_paths else None
    scenario = CounterexampleScenario(k, grid, seed, paths, ensemble)
    truncated = int((~paths["stopped"]).sum())
    if truncated:
        logger.warning(f"{truncated} of {n_paths} paths not stopped by t = {grid.t_end:.6g}; flagged as truncated")
    logger.info(f"Counterexample k={k}: {n_paths} paths, {grid.steps} steps, "
                f"stopped fraction {scenario.stopped_fraction:.4f}")
    return scenario


def _mean_se(values: np.ndarray) -> Dict[str, float]:
    values = np.asarray(values, dtype=float)
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    return {"mean": float(values.mean()), "stderr": se}


@dataclass
class SolutionReport:
    k: int
    rms_residual: float
    residual_after_tau: float
    first_step: Dict[str, float]
    identity_gap: float
    bracket_at_tau: Dict[str, float]
    stopping_identity: Dict[str, float]
    z2_channel_gap: float
    y_bound: Dict[str, float]
    metadata: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def passed(self) -> bool:
        sigmas = 3.0
        first = self.first_step
        ito_ok = abs(first["mean"]) <= sigmas * first["stderr"] + 1e-15
        stop = self.stopping_identity
        stop_ok = abs(stop["mean"]) <= sigmas * stop["stderr"] + 1e-12
        bracket = self.bracket_at_tau
        bracket_ok = abs(bracket["mean"] - bracket["oracle"]) <= sigmas * bracket["stderr"]
        return (self.error is None and self.residual_after_tau == 0.0 and ito_ok and stop_ok and bracket_ok
                and self.identity_gap <= 1e-12 and self.z2_channel_gap <= 1e-10)

    def to_dict(self) -> Dict[str, Any]:
        return {"k": self.k, "rms_residual": self.rms_residual, "residual_after_tau": self.residual_after_tau,
                "first_step": self.first_step, "identity_gap": self.identity_gap,
                "bracket_at_tau": self.bracket_at_tau, "stopping_identity": self.stopping_identity,
                "z2_channel_gap": self.z2_channel_gap, "y_bound": self.y_bound, "passed": self.passed,
                "metadata": self.metadata, "error": self.error}


def verify_solution(scenario: CounterexampleScenario) -> SolutionReport:
    """Discrete residual of Y_{k+1} - Y_k - Z_k ΔW_k - ½Z_k² Δt and the pathwise invariants.

    E[X_τ²] = E[<X>_τ] holds exactly for the discrete Itô sum, so their paired
    difference must vanish within the MC band. E[<X>_τ] with the grid overshoot
    removed must match E[min(T, H)], T the exit time of (-1, 1) and H the clock
    at the horizon, within the same band. Unstopped paths count at H.
    """
    df = scenario.paths[scenario.paths["valid"]]
    invalid = scenario.n_paths - len(df)
    if invalid:
        logger.warning(f"{invalid} paths overshoot X + 2 <= 0; excluded from verification")
    stopped = df[df["stopped"]]
    stopping = (df["x_tau"] ** 2 - df["bracket_tau"]).to_numpy()
    report = SolutionReport(
        scenario.k,
        float(np.sqrt(np.mean(df["residual"] ** 2))),
        float(df["residual_after"].max()),
        _mean_se(df["first_residual"].to_numpy()),
        float(df["z_identity_gap"].max()),
        {**_mean_se(df["bracket_corrected"].to_numpy()), "oracle": exit_time_mean(clock_horizon(scenario.grid)),
         "raw_mean": float(stopped["bracket_tau"].mean()) if len(stopped) else float("nan")},
        _mean_se(stopping),
        float(np.max(np.abs(df["z2_integral"] - df["z2_channel"]))),
        {"y_abs_max": float(df["y_abs_max"].max()), "log3": float(np.log(3.0)),
         "overshoot_max": float(stopped["overshoot"].max()) if len(stopped) else 0.0},
        metadata={**scenario.to_dict(), "excluded_paths": invalid},
    )
    if scenario.ensemble is not None:
        half = scenario.ensemble.n_paths // 2
        full_bmo = bmo_norm(scenario.ensemble, channel="ZM", bracket_channel="ZM_bracket")
        half_ens = PathEnsemble(half, scenario.grid, scenario.seed, scenario.ensemble.brownian[:half],
                                {name: v[:half] for name, v in scenario.ensemble.channels.items()})
        half_bmo = bmo_norm(half_ens, channel="ZM", bracket_channel="ZM_bracket")
        report.metadata["zm_bmo"] = {"full": full_bmo.value, "half": half_bmo.value, "stderr": full_bmo.error}
    logger.info(f"verify k={scenario.k}: rms residual {report.rms_residual:.3e}, passed {report.passed}")
    return report


@dataclass
class RefinementReport:
    rows: List[Dict[str, Any]]
    order: float
    min_order: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.order) and self.order >= self.min_order)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": self.rows, "order": self.order, "min_order": self.min_order, "passed": self.passed}


def refinement_order(ks: Optional[Sequence[int]] = None, n_paths: int = 4096, seed: int = 0,
                     settings: Optional[CounterexampleSettings] = None,
                     mc_settings: Optional[MonteCarloSettings] = None) -> RefinementReport:
    """Order in dt of the RMS accumulated residual across grids k, sharing Brownian paths.

    Paths are simulated on the finest grid; coarser grids read the same
    Brownian motion at their own points.
    """
    settings = settings or CounterexampleSettings()
    ks = sorted(settings.refinement_ks if ks is None else ks)
    finest = ks[-1]
    fine_grid = counterexample_grid(finest, settings.step_offset)
    spec = bundled_spec("time-change")

    def block_residuals(block: PathEnsemble) -> Dict[int, np.ndarray]:
        out = {}
        for k in ks:
            factor = 2 ** (finest - k)
            grid = counterexample_grid(k, settings.step_offset)
            brownian = block.brownian[:, :grid.steps * factor + 1:factor]
            coarse = PathEnsemble(block.n_paths, grid, seed, brownian, integrate_paths(spec, grid, brownian), spec.name)
            frame = _summarize(coarse, keep_paths=False)["frame"]
            out[k] = frame.loc[frame["valid"], "residual"].to_numpy()
        return out

    blocks = _simulator(settings, mc_settings).map_blocks(spec, fine_grid, n_paths, seed, block_residuals)
    rows = []
    for k in ks:
        residual = np.concatenate([b[k] for b in blocks])
        grid = counterexample_grid(k, settings.step_offset)
        rows.append({"k": k, "dt": grid.dt, "steps": grid.steps, "paths": int(residual.size),
                     "rms_residual": float(np.sqrt(np.mean(residual ** 2)))})
    frame = pd.DataFrame(rows)
    order = float(np.polyfit(np.log(frame["dt"]), np.log(frame["rms_residual"]), 1)[0])
    logger.info(f"residual order in dt over k={ks}: {order:.3f}")
    return RefinementReport(rows, order, settings.min_order)


def sec(x: float) -> float:
    return float(1.0 / np.cos(x))


def moment_oracle(lam: float) -> Optional[Dict[str, float]]:
    """[sec(√(2λ)/3), sec(√(2λ))] brackets E[exp(λ∫Z²)] while λ < π²/8"""
    if not 0.0 <= lam < FINITE_LIMIT:
        return None
    root = np.sqrt(2.0 * lam)
    return {"lo": sec(root / 3.0), "hi": sec(root)}


@dataclass
class BlowupReport:
    rows: List[Dict[str, Any]]
    crossover: Optional[float]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        for row in self.rows:
            if row["regime"] == "finite" and not row["in_bracket"]:
                return False
            if row["regime"] == "divergent" and row["verdict"] != Verdict.INFINITE.value:
                return False
            if row["lambda"] == 0.0 and row["estimate"] != 1.0:
                return False
        return True

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)[["lambda", "estimate", "stderr", "verdict", "regime"]]

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": self.rows, "crossover": self.crossover, "passed": self.passed, "metadata": self.metadata}


def _regime(lam: float) -> str:
    if lam < FINITE_LIMIT:
        return "finite"
    if lam >= DIVERGENT_LIMIT:
        return "divergent"
    return "descriptive"


def moment_blowup_scan(scenario: CounterexampleScenario, lambdas: Optional[Sequence[float]] = None,
                       sigmas: float = 3.0, settings: Optional[ExponentSettings] = None,
                       seed: int = 0) -> BlowupReport:
    """MC estimate of E[exp(λ∫Z² ds)] per λ with the doubling diagnostic.

    Below π²/8 the estimate must land in the sec bracket within the sigma band;
    from 9π²/8 on the doubling diagnostic or an overflow must flag divergence.
    In between the verdict is descriptive.
    """
    settings = settings or ExponentSettings()
    lambdas = CounterexampleSettings().lambdas if lambdas is None else lambdas
    y = scenario.paths.loc[scenario.paths["valid"], "z2_integral"].to_numpy()
    doubling = DoublingDiagnostic(y, seed=seed, settings=settings)
    rows = []
    for lam in lambdas:
        lam = float(lam)
        exponent = lam * y
        overflow = bool(np.any(exponent > 700.0))
        values = np.exp(np.minimum(exponent, 700.0))
        stats = _mean_se(values)
        fires = doubling.fires(lam)
        regime = _regime(lam)
        oracle = moment_oracle(lam)
        in_bracket = None
        if oracle is not None:
            band = sigmas * stats["stderr"]
            in_bracket = bool(oracle["lo"] - band <= stats["mean"] <= oracle["hi"] + band)
        if lam == 0.0:
            verdict = Verdict.FINITE
        elif fires or overflow:
            verdict = Verdict.INFINITE
        elif regime == "finite":
            verdict = Verdict.FINITE
        else:
            verdict = Verdict.UNDETERMINED
        rows.append({"lambda": lam, "estimate": stats["mean"], "stderr": stats["stderr"], "verdict": verdict.value,
                     "regime": regime, "oracle_lo": oracle["lo"] if oracle else None,
                     "oracle_hi": oracle["hi"] if oracle else None, "in_bracket": in_bracket,
                     "overflow": overflow, "doubling_growth": doubling.growth(lam)})
        logger.info(f"λ={lam:g}: E[exp(λ∫Z²)] ≈ {stats['mean']:.4g} ± {stats['stderr']:.2g} -> {verdict.value}")
    crossover = next((row["lambda"] for row in rows if row["verdict"] == Verdict.INFINITE.value), None)
    return BlowupReport(rows, crossover, {"paths": int(y.size), "k": scenario.k})

"""
Monte Carlo Brownian Path Ensembles
Seeded path generation on uniform grids, Ito integrals, hitting times and Markov-state binning
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from components.errors import ConfigurationError, EmptyEnsembleError, UnknownScenarioError
from config.lab_config import BarrierKind, ExponentSettings, MonteCarloSettings

logger = logging.getLogger(__name__)

NOT_STOPPED = -1
Integrand = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or not self.t_end > self.t_start:
            raise ConfigurationError(
                f"time grid needs steps >= 1 and t_end > t_start, got [{self.t_start}, {self.t_end}] / {self.steps}"
            )

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.steps

    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.steps + 1) * self.dt

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.steps % factor:
            raise ConfigurationError(f"{self.steps} steps cannot be coarsened by {factor}")
        return TimeGrid(self.t_start, self.t_end, self.steps // factor)

    @classmethod
    def with_step(cls, t_start: float, t_end: float, dt: float) -> "TimeGrid":
        steps = int(round((t_end - t_start) / dt))
        return cls(t_start, t_start + steps * dt, steps)


@dataclass(frozen=True)
class BarrierRule:
    kind: BarrierKind
    level: float

    def fires(self, x: np.ndarray) -> np.ndarray:
        if self.kind == BarrierKind.ABS_ABOVE:
            return np.abs(x) > self.level
        if self.kind == BarrierKind.ABOVE:
            return x > self.level
        return x < self.level

    def describe(self) -> str:
        return {BarrierKind.ABS_ABOVE: f"|x| > {self.level:g}", BarrierKind.ABOVE: f"x > {self.level:g}",
                BarrierKind.BELOW: f"x < {self.level:g}"}[self.kind]


@dataclass
class MartingaleSpec:
    """Recipe M_t = ∫ h(s, W_s, M_s) dW_s, optionally stopped at a barrier of M"""
    name: str
    integrand: Integrand
    singular_time: Optional[float] = None
    stop_rule: Optional[BarrierRule] = None
    exponential: bool = False
    description: str = ""

    def validate(self, grid: TimeGrid) -> None:
        if self.singular_time is not None and grid.t_end >= self.singular_time:
            raise ConfigurationError(
                f"spec '{self.name}' is singular at t={self.singular_time}; grid must end before it (t_end={grid.t_end})"
            )


def _zero(t, w, m):
    return np.zeros_like(w)


def _unit(t, w, m):
    return np.ones_like(w)


def _time_change(t, w, m):
    return np.full_like(w, 1.0 / np.sqrt(1.0 - t))


BUNDLED_SPECS: Dict[str, Callable[[], MartingaleSpec]] = {
    "zero": lambda: MartingaleSpec("zero", _zero, description="h = 0"),
    "brownian": lambda: MartingaleSpec("brownian", _unit, description="h = 1, M = W"),
    "brownian-exponential": lambda: MartingaleSpec(
        "brownian-exponential", _unit, exponential=True, description="h = 1 with density exp(W - t/2)"
    ),
    "time-change": lambda: MartingaleSpec(
        "time-change", _time_change, singular_time=1.0, description="h(s) = (1 - s)^(-1/2)"
    ),
    "stopped-time-change": lambda: MartingaleSpec(
        "stopped-time-change", _time_change, singular_time=1.0,
        stop_rule=BarrierRule(BarrierKind.ABS_ABOVE, 1.0),
        description="h(s) = (1 - s)^(-1/2) stopped at |M| > 1",
    ),
}


def bundled_spec(name: str) -> MartingaleSpec:
    if name not in BUNDLED_SPECS:
        raise UnknownScenarioError(name, list(BUNDLED_SPECS))
    return BUNDLED_SPECS[name]()


@dataclass
class PathEnsemble:
    n_paths: int
    grid: TimeGrid
    seed: int
    brownian: np.ndarray
    channels: Dict[str, np.ndarray] = field(default_factory=dict)
    spec_name: str = ""

    def channel(self, name: str) -> np.ndarray:
        if name == "W":
            return self.brownian
        if name not in self.channels:
            raise ConfigurationError(f"channel '{name}' not in ensemble (have: {', '.join(sorted(self.channels))})")
        return self.channels[name]

    def has_channel(self, name: str) -> bool:
        return name == "W" or name in self.channels

    def with_channel(self, name: str, values: np.ndarray) -> "PathEnsemble":
        values = np.asarray(values)
        if values.shape != self.brownian.shape:
            raise ConfigurationError(f"channel '{name}' has shape {values.shape}, expected {self.brownian.shape}")
        channels = dict(self.channels)
        channels[name] = values
        return PathEnsemble(self.n_paths, self.grid, self.seed, self.brownian, channels, self.spec_name)

    def increments(self, name: str) -> np.ndarray:
        return np.diff(self.channel(name), axis=1)

    def increment_check(self, sigmas: float = 5.0) -> Dict[str, Any]:
        """Sanity band on the Brownian increments: mean 0, variance dt"""
        dw = np.diff(self.brownian, axis=1).ravel()
        n, dt = dw.size, self.grid.dt
        mean_z = float(dw.mean() / np.sqrt(dt / n))
        var_z = float((dw.var() - dt) / (dt * np.sqrt(2.0 / n)))
        return {"mean_z": mean_z, "var_z": var_z,
                "passed": bool(abs(mean_z) <= sigmas and abs(var_z) <= sigmas)}

    def summary(self) -> pd.DataFrame:
        """One row per diagnostic, suitable for CSV emission"""
        rows = []
        check = self.increment_check()
        rows.append({"diagnostic": "increment_mean_z", "value": check["mean_z"], "stderr": 1.0})
        rows.append({"diagnostic": "increment_var_z", "value": check["var_z"], "stderr": 1.0})
        for name in sorted(self.channels):
            terminal = self.channels[name][:, -1]
            rows.append({"diagnostic": f"{name}_terminal_mean", "value": float(terminal.mean()),
                         "stderr": float(terminal.std(ddof=1) / np.sqrt(self.n_paths)) if self.n_paths > 1 else np.nan})
        return pd.DataFrame(rows)

    def export_raw(self, path: Union[str, Path], channels: Optional[List[str]] = None) -> Path:
        """Flat little-endian float64 array (channel, path, step) plus a JSON header next to it"""
        path = Path(path)
        names = channels or ["W"] + sorted(self.channels)
        data = np.stack([self.channel(name) for name in names]).astype("<f8")
        path.parent.mkdir(parents=True, exist_ok=True)
        data.tofile(path)
        header = {"n_paths": self.n_paths, "steps": self.grid.steps, "channels": names,
                  "t_start": self.grid.t_start, "t_end": self.grid.t_end, "seed": self.seed,
                  "dtype": "<f8", "order": ["channel", "path", "step"]}
        header_path = path.with_suffix(".json")
        header_path.write_text(json.dumps(header, indent=2))
        return header_path

    @classmethod
    def concatenate(cls, parts: List["PathEnsemble"]) -> "PathEnsemble":
        if not parts:
            raise EmptyEnsembleError("no ensemble blocks to concatenate")
        first = parts[0]
        channels = {name: np.concatenate([p.channels[name] for p in parts]) for name in first.channels}
        brownian = np.concatenate([p.brownian for p in parts])
        return cls(brownian.shape[0], first.grid, first.seed, brownian, channels, first.spec_name)


def integrate_paths(spec: MartingaleSpec, grid: TimeGrid, brownian: np.ndarray) -> Dict[str, np.ndarray]:
    """Left-point Ito integral and bracket of the spec along given Brownian paths.

    Channels: ``M``, ``bracket`` and, for exponential specs, ``density``. A
    truncated Brownian array integrates over the matching prefix of the grid.
    """
    spec.validate(grid)
    n, dt, times = brownian.shape[0], grid.dt, grid.times()
    steps = brownian.shape[1] - 1
    if steps > grid.steps:
        raise ConfigurationError(f"paths have {steps} steps, grid only {grid.steps}")
    dw = np.diff(brownian, axis=1)
    m = np.zeros_like(brownian)
    q = np.zeros_like(brownian)
    live = np.ones(n, dtype=bool)
    for k in range(steps):
        h = np.asarray(spec.integrand(times[k], brownian[:, k], m[:, k]), dtype=float)
        if spec.stop_rule is not None:
            h = np.where(live, h, 0.0)
        m[:, k + 1] = m[:, k] + h * dw[:, k]
        q[:, k + 1] = q[:, k] + h * h * dt
        if spec.stop_rule is not None:
            live &= ~spec.stop_rule.fires(m[:, k + 1])
    channels = {"M": m, "bracket": q}
    if spec.exponential:
        channels["density"] = np.exp(m - 0.5 * q)
    return channels


def _block_sizes(n_paths: int, block_size: int) -> List[int]:
    full, rest = divmod(n_paths, block_size)
    return [block_size] * full + ([rest] if rest else [])


class PathSimulator:
    """Generates ensembles block by block; block i draws from SeedSequence(seed).spawn(n_blocks)[i]"""

    def __init__(self, settings: Optional[MonteCarloSettings] = None):
        self.settings = settings or MonteCarloSettings()
        self.logger = logging.getLogger(__name__)

    def _block(self, spec: MartingaleSpec, grid: TimeGrid, size: int,
               stream: np.random.SeedSequence, seed: int) -> PathEnsemble:
        rng = np.random.default_rng(stream)
        brownian = np.zeros((size, grid.steps + 1))
        brownian[:, 1:] = np.cumsum(rng.normal(0.0, np.sqrt(grid.dt), size=(size, grid.steps)), axis=1)
        return PathEnsemble(size, grid, seed, brownian, integrate_paths(spec, grid, brownian), spec.name)

    def map_blocks(self, spec: MartingaleSpec, grid: TimeGrid, n_paths: int, seed: int,
                   fn: Callable[[PathEnsemble], Any]) -> List[Any]:
        """Apply fn to every block in block order; only fn's results are kept"""
        if n_paths < 1:
            raise EmptyEnsembleError("n_paths must be positive")
        spec.validate(grid)
        sizes = _block_sizes(n_paths, self.settings.block_size)
        streams = np.random.SeedSequence(seed).spawn(len(sizes))

        def run(i: int) -> Any:
            return fn(self._block(spec, grid, sizes[i], streams[i], seed))

        self.logger.debug(f"{spec.name}: {n_paths} paths in {len(sizes)} blocks, {self.settings.workers} workers")
        if self.settings.workers <= 1:
            return [run(i) for i in range(len(sizes))]
        with ThreadPoolExecutor(max_workers=self.settings.workers) as pool:
            return list(pool.map(run, range(len(sizes))))

    def simulate(self, spec: MartingaleSpec, grid: TimeGrid, n_paths: int, seed: int) -> PathEnsemble:
        ensemble = PathEnsemble.concatenate(self.map_blocks(spec, grid, n_paths, seed, lambda block: block))
        self.logger.info(f"Simulated {spec.name}: {n_paths} paths, {grid.steps} steps, seed {seed}")
        return ensemble


def simulate(spec: MartingaleSpec, grid: TimeGrid, n_paths: int, seed: int,
             settings: Optional[MonteCarloSettings] = None) -> PathEnsemble:
    return PathSimulator(settings).simulate(spec, grid, n_paths, seed)


@dataclass
class GridStoppingTime:
    """Per-path stopping index; NOT_STOPPED marks paths that never fire"""
    index: np.ndarray
    steps: int
    description: str = ""

    @property
    def stopped(self) -> np.ndarray:
        return self.index != NOT_STOPPED

    @property
    def stopped_fraction(self) -> float:
        return float(self.stopped.mean()) if self.index.size else 0.0

    def capped(self) -> np.ndarray:
        """Stopping index with never-stopped paths sent to the horizon"""
        return np.where(self.stopped, self.index, self.steps)

    def value_at(self, values: np.ndarray) -> np.ndarray:
        return values[np.arange(values.shape[0]), self.capped()]

    @classmethod
    def deterministic(cls, n_paths: int, steps: int, k: int) -> "GridStoppingTime":
        return cls(np.full(n_paths, k), steps, f"t_{k}")


def hit_time(ensemble: PathEnsemble, channel: str, rule: BarrierRule) -> GridStoppingTime:
    """First grid index where the barrier rule fires on the channel"""
    fired = rule.fires(ensemble.channel(channel))
    first = np.argmax(fired, axis=1)
    index = np.where(fired[np.arange(fired.shape[0]), first], first, NOT_STOPPED)
    return GridStoppingTime(index, ensemble.grid.steps, f"first {channel}: {rule.describe()}")


def overshoot_step(ensemble: PathEnsemble, tau: GridStoppingTime, bracket_channel: str = "bracket",
                   quantile: float = 0.99) -> float:
    """Bracket increment of the step that triggered the stop (upper quantile over stopped paths)"""
    if not np.any(tau.stopped & (tau.index > 0)):
        return 0.0
    bracket = ensemble.channel(bracket_channel)
    rows = np.flatnonzero(tau.stopped & (tau.index > 0))
    steps = bracket[rows, tau.index[rows]] - bracket[rows, tau.index[rows] - 1]
    return float(np.quantile(steps, quantile))


def corrected_bracket(ensemble: PathEnsemble, tau: GridStoppingTime, level: float,
                      bracket_channel: str = "bracket",
                      coefficient: float = ExponentSettings.overshoot_coefficient) -> np.ndarray:
    """Bracket at the capped stop with the grid-monitoring excess removed on stopped paths.

    A walk monitored on the grid crosses a level by about coefficient·σ on average,
    σ the std of the crossing step, so E[<M>_τ] = E[M_τ²] sits near (level + coefficient·σ)².
    Paths must start at 0.
    """
    bracket = ensemble.channel(bracket_channel)
    rows = np.arange(ensemble.n_paths)
    stop = tau.capped()
    value = bracket[rows, stop]
    sigma = np.sqrt(np.maximum(value - bracket[rows, np.maximum(stop - 1, 0)], 0.0))
    shift = coefficient * sigma
    return value - np.where(tau.stopped, 2.0 * level * shift + shift * shift, 0.0)


def exit_time_mean(horizon: float, level: float = 1.0, terms: int = 64) -> float:
    """E[min(T, horizon)] for T the exit time of Brownian motion from (-level, level)"""
    if np.isinf(horizon):
        return level * level
    n = 2.0 * np.arange(terms) + 1.0
    signs = np.where(np.arange(terms) % 2 == 0, 1.0, -1.0)
    h = horizon / (level * level)
    tail = np.sum(signs / n ** 3 * np.exp(-n * n * np.pi ** 2 * h / 8.0)) * 32.0 / np.pi ** 3
    return float(level * level * (1.0 - tail))


@dataclass
class MarkovStateBinner:
    """Bins the per-path Markov state of a channel at an index or stopping time"""
    channel: str = "M"
    n_bins: int = 8
    min_count: int = 50
    transform: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def state(self, ensemble: PathEnsemble, at: Union[int, GridStoppingTime]) -> np.ndarray:
        values = ensemble.channel(self.channel)
        x = values[:, at] if isinstance(at, (int, np.integer)) else at.value_at(values)
        return self.transform(x) if self.transform is not None else x


@dataclass
class BinEstimate:
    lower: float
    upper: float
    count: int
    state_mean: float
    mean: float
    stderr: float
    usable: bool

    @property
    def center(self) -> float:
        return 0.5 * (self.lower + self.upper)


def bin_estimates(state: np.ndarray, target: np.ndarray, n_bins: int, min_count: int) -> List[BinEstimate]:
    """Equal-count bins over the observed state range with per-bin mean and standard error"""
    if state.size == 0:
        raise EmptyEnsembleError("no paths to bin")
    edges = np.unique(np.quantile(state, np.linspace(0.0, 1.0, n_bins + 1)))
    if edges.size == 1:
        edges = np.array([edges[0], edges[0]])
    labels = np.clip(np.searchsorted(edges, state, side="right") - 1, 0, edges.size - 2)
    out = []
    for b in range(edges.size - 1):
        mask = labels == b
        count = int(mask.sum())
        if count == 0:
            continue
        sel = target[mask]
        stderr = float(sel.std(ddof=1) / np.sqrt(count)) if count > 1 else np.inf
        out.append(BinEstimate(float(edges[b]), float(edges[b + 1]), count, float(state[mask].mean()),
                               float(sel.mean()), stderr, count >= min_count))
    unusable = sum(1 for b in out if not b.usable)
    if unusable:
        logger.warning(f"{unusable} of {len(out)} bins below the minimum count {min_count}")
    return out


def conditional_estimate(ensemble: PathEnsemble, target: np.ndarray, binner: MarkovStateBinner,
                         at: Union[int, GridStoppingTime]) -> List[BinEstimate]:
    """Binned estimate of E[target | F_at] through the declared Markov state"""
    if ensemble.n_paths == 0:
        raise EmptyEnsembleError("ensemble has no paths")
    target = np.asarray(target, dtype=float)
    if target.shape != (ensemble.n_paths,):
        raise ConfigurationError(f"target must hold one value per path, got shape {target.shape}")
    return bin_estimates(binner.state(ensemble, at), target, binner.n_bins, binner.min_count)


def estimates_frame(estimates: List[BinEstimate]) -> pd.DataFrame:
    return pd.DataFrame([{**vars(e), "center": e.center} for e in estimates])


def prefix_matches(spec: MartingaleSpec, ensemble: PathEnsemble, k: int) -> bool:
    """Recompute the derived channels from increments up to k and compare with the stored prefix"""
    recomputed = integrate_paths(spec, ensemble.grid, ensemble.brownian[:, :k + 1])
    return all(np.array_equal(recomputed[name], ensemble.channels[name][:, :k + 1]) for name in recomputed)

"""
BMO Martingale Laboratory Configuration
Tolerances, Monte Carlo settings, solver defaults and the run configuration
"""

import json
import os
from dataclasses import dataclass, field, asdict, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from components.errors import ConfigurationError

load_dotenv()

REPORT_SCHEMA_VERSION = "1.0"
OUTPUT_DIR_ENV = "BMOLAB_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "reports"


class Backend(Enum):
    TREE = "tree"
    MC = "mc"


class NormName(Enum):
    RP = "R^p"
    HP = "H^p"
    BMO = "BMO"
    LP = "L^p"
    REVERSE_HOLDER = "R_p"


class Verdict(Enum):
    FINITE = "finite"
    INFINITE = "infinite"
    UNDETERMINED = "undetermined"


class BarrierKind(Enum):
    ABS_ABOVE = "abs_above"   # |x| > c
    ABOVE = "above"           # x > c
    BELOW = "below"           # x < c


class SolverKind(Enum):
    SE = "se"
    BSDE = "bsde"
    BSDE_BMO = "bsde-bmo"


class EmissionFormat(Enum):
    JSON = "json"
    CSV = "csv"


@dataclass
class Tolerances:
    tree: float = 1e-10
    martingale: float = 1e-12
    probability: float = 1e-14
    degenerate_variance: float = 1e-28
    mc_sigmas: float = 3.0


@dataclass
class MonteCarloSettings:
    block_size: int = 4096
    workers: int = 1
    min_bin_count: int = 50
    n_bins: int = 8
    hitting_levels: int = 8
    probe_times: Optional[int] = None  # grid times in the BMO stopping family; None means all
    confidence_sigmas: float = 3.0


@dataclass
class ExponentSettings:
    cap: float = 10.0
    bisection_tol: float = 0.01
    doubling_factor: float = 1.5
    doubling_runs: int = 2
    doubling_subsamples: int = 32
    tail_quantile_start: float = 0.5
    tail_min_at_risk: float = 0.02
    min_tail_events: int = 30
    overshoot_coefficient: float = 0.5826  # expected overshoot of a Gaussian walk, in step std units
    overshoot_quantile: float = 0.9
    block_size: int = 1024    # paths per block when streaming long grids
    oracle_width: float = 0.10  # max relative bracket width around a known exponent


@dataclass
class SolverSettings:
    tol: float = 1e-12
    max_iter: int = 200
    bdg_constant: float = 2.0
    eps1: float = 0.3
    eps2: float = 0.3
    eps3: float = 0.3


@dataclass
class SpectralSettings:
    n_max: int = 6
    restarts: int = 8
    probes: int = 4
    mc_tolerance: float = 0.10
    audit_trials: int = 100
    r_floor: float = 0.3      # loose lower bound on r̂ for a finite-b martingale
    ray_lambdas: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 3.0])
    mc_k: int = 6             # spectral MC grid ends at 1 - 2^-k
    mc_step_offset: int = 3
    mc_paths: int = 20_000


@dataclass
class CounterexampleSettings:
    k: int = 10
    step_offset: int = 3   # grid step is 2^-(k + step_offset)
    n_paths: int = 100_000
    lambdas: List[float] = field(default_factory=lambda: [0.0, 1.0, 12.0])
    refinement_ks: List[int] = field(default_factory=lambda: [8, 10, 12])
    min_order: float = 0.4
    block_size: int = 256     # paths per block; grids here are long


# Bundled scenario defaults, keyed by subcommand
SCENARIO_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "verify": {"ineq": "fefferman", "corpus": "seeded:{n:100,depth:4,branching:2}", "p": 2.0},
    "solve": {"kind": "se", "spec": "bundled:linear-small"},
    "linear": {"op": "fundamental", "spec": "bundled:scalar-small"},
    "spectral": {"op": "radius", "spec": "bundled:binary-depth3", "p": [2.0], "lam": "0,1"},
    "counterexample": {"k": 10, "paths": 100_000, "lambdas": [0.0, 1.0, 12.0]},
    "exponent": {"spec": "bundled:stopped-time-change", "paths": 200_000, "k": 10, "step_offset": 2, "which": "b"},
    "corpus": {"op": "generate", "corpus": "seeded:{n:10,depth:4,branching:2}"},
}


def default_output_dir() -> Path:
    """Output directory from the environment, falling back to ./reports"""
    return Path(os.getenv(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


@dataclass
class RunConfig:
    """Configuration for one CLI run; every field mirrors a command-line flag"""
    subcommand: str
    scenario: Optional[str] = None
    seed: Optional[int] = None
    backend: Backend = Backend.TREE
    output_dir: Path = field(default_factory=default_output_dir)
    formats: List[EmissionFormat] = field(default_factory=lambda: [EmissionFormat.JSON])
    options: Dict[str, Any] = field(default_factory=dict)
    tolerances: Tolerances = field(default_factory=Tolerances)
    montecarlo: MonteCarloSettings = field(default_factory=MonteCarloSettings)
    exponent: ExponentSettings = field(default_factory=ExponentSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    spectral: SpectralSettings = field(default_factory=SpectralSettings)
    counterexample: CounterexampleSettings = field(default_factory=CounterexampleSettings)
    log_level: str = "INFO"

    def __post_init__(self):
        if isinstance(self.backend, str):
            self.backend = Backend(self.backend)
        self.output_dir = Path(self.output_dir)
        self.formats = [EmissionFormat(f) if isinstance(f, str) else f for f in self.formats]

    @classmethod
    def from_yaml(cls, path: str, subcommand: str) -> "RunConfig":
        """Load a YAML or JSON config file whose keys are the CLI flag names"""
        return cls(subcommand=subcommand).merge(read_config_file(path))

    def merge(self, flags: Dict[str, Any]) -> "RunConfig":
        """Apply flag values on top of this config; None values are ignored"""
        nested = {
            "tolerances": self.tolerances,
            "montecarlo": self.montecarlo,
            "exponent": self.exponent,
            "solver": self.solver,
            "spectral": self.spectral,
            "counterexample": self.counterexample,
        }
        for key, value in flags.items():
            if value is None:
                continue
            if key in nested and isinstance(value, dict):
                _update_dataclass(nested[key], value)
            elif key in ("scenario", "seed", "backend", "output_dir", "formats", "log_level"):
                setattr(self, key, value)
            elif key == "subcommand":
                continue
            else:
                self.options[key] = value
        self.__post_init__()
        return self

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigurationError(f"Subcommand '{self.subcommand}' needs --seed for Monte Carlo runs")
        return int(self.seed)

    def echo(self) -> Dict[str, Any]:
        """Config echo for the bundle manifest"""
        payload = asdict(self)
        payload["backend"] = self.backend.value
        payload["output_dir"] = str(self.output_dir)
        payload["formats"] = [f.value for f in self.formats]
        return json.loads(json.dumps(payload, default=str))


def _update_dataclass(target: Any, values: Dict[str, Any]) -> None:
    known = {f.name for f in fields(target)}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(f"Unknown setting '{key}' for {type(target).__name__}")
        setattr(target, key, value)


def read_config_file(path: str) -> Dict[str, Any]:
    """Mapping stored in a YAML (or JSON) config file"""
    try:
        with open(path, "r") as handle:
            raw = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigurationError(f"Config file {path} must hold a mapping")
    return raw

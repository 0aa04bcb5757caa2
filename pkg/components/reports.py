"""
Report Bundles
Typed report collection, manifest and atomic JSON/CSV emission for every subcommand
"""

import hashlib
import json
import logging
import os
import platform
import shutil
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import networkx
import numpy as np
import pandas as pd
import scipy
import yaml

from components.errors import ConfigurationError
from config.lab_config import REPORT_SCHEMA_VERSION, EmissionFormat

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def sanitize(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays unwrapped, non-finite floats as strings, complex as {re, im}"""
    if isinstance(value, dict):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return sanitize(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": sanitize(float(value.real)), "im": sanitize(float(value.imag))}
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if np.isnan(value):
            return "nan"
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return sanitize(value.value)
    return value


def canonical_json(payload: Any) -> str:
    """Sorted-key, fixed-indent JSON; equal payloads give equal bytes"""
    return json.dumps(sanitize(payload), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def config_digest(config_echo: Dict[str, Any]) -> str:
    echo = {k: v for k, v in config_echo.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(echo).encode("utf-8")).hexdigest()[:12]


def library_versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "networkx": networkx.__version__, "pyyaml": yaml.__version__}


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class ReportBundle:
    """Payloads and tables of one run; wall-clock times live only in the manifest"""
    subcommand: str
    config: Dict[str, Any]
    payloads: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)
    started: str = field(default_factory=_utc_now)
    finished: Optional[str] = None

    def add(self, name: str, report: Any, asserted: bool = True) -> Any:
        """Store a report (anything with to_dict, a dict or a list of reports); record its pass flag"""
        if name in self.payloads:
            raise ConfigurationError(f"report '{name}' added twice")
        if isinstance(report, (list, tuple)):
            payload = [r.to_dict() if hasattr(r, "to_dict") else r for r in report]
            flags = [bool(r.passed) for r in report if hasattr(r, "passed")]
            passed = all(flags) if flags else None
        else:
            payload = report.to_dict() if hasattr(report, "to_dict") else report
            passed = bool(report.passed) if hasattr(report, "passed") else None
        self.payloads[name] = payload
        if asserted and passed is not None:
            self.checks[name] = passed
        return report

    def add_check(self, name: str, passed: bool) -> None:
        self.checks[name] = bool(passed)

    def add_table(self, name: str, frame: pd.DataFrame) -> pd.DataFrame:
        self.tables[name] = frame.reset_index(drop=True)
        return frame

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failing(self) -> List[str]:
        return sorted(name for name, ok in self.checks.items() if not ok)

    def manifest(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "subcommand": self.subcommand,
            "config": self.config,
            "config_digest": config_digest(self.config),
            "versions": library_versions(),
            "reports": sorted(self.payloads),
            "tables": sorted(self.tables),
            "checks": dict(sorted(self.checks.items())),
            "passed": self.passed,
            "started": self.started,
            "finished": self.finished,
        }

    def payload_files(self, formats: Sequence[EmissionFormat]) -> Dict[str, str]:
        """File name -> text for every payload, without the manifest"""
        files: Dict[str, str] = {}
        if EmissionFormat.JSON in formats:
            for name, payload in self.payloads.items():
                files[f"{name}.json"] = canonical_json({"schema_version": REPORT_SCHEMA_VERSION, "name": name,
                                                        "report": payload})
        for name, frame in self.tables.items():
            if EmissionFormat.CSV in formats:
                files[f"{name}.csv"] = frame.to_csv(index=False, lineterminator="\n")
            if EmissionFormat.JSON in formats and f"{name}.json" not in files:
                files[f"{name}.json"] = canonical_json({"schema_version": REPORT_SCHEMA_VERSION, "name": name,
                                                        "table": frame.to_dict(orient="records")})
        return files

    def write(self, output_dir: Path, formats: Sequence[EmissionFormat]) -> Path:
        """Write into a temp directory next to the target, then rename it into place"""
        self.finished = self.finished or _utc_now()
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        target = output_dir / f"{self.subcommand}-{config_digest(self.config)}"
        staging = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=output_dir))
        try:
            for name, text in self.payload_files(formats).items():
                (staging / name).write_text(text, encoding="utf-8")
            (staging / MANIFEST_NAME).write_text(canonical_json(self.manifest()), encoding="utf-8")
            if target.exists():
                if not (target / MANIFEST_NAME).exists():
                    raise ConfigurationError(f"{target} exists and is not a report bundle; refusing to replace it")
                retired = Path(tempfile.mkdtemp(prefix=f".{target.name}-old-", dir=output_dir))
                os.replace(target, retired / target.name)
                os.replace(staging, target)
                shutil.rmtree(retired, ignore_errors=True)
            else:
                os.replace(staging, target)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
        logger.info(f"Wrote {len(self.payloads)} reports and {len(self.tables)} tables to {target}")
        return target


def load_bundle(path: Path) -> Dict[str, Any]:
    """Manifest plus decoded JSON payloads of a written bundle"""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise ConfigurationError(f"{path} holds no {MANIFEST_NAME}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    payloads = {p.stem: json.loads(p.read_text(encoding="utf-8"))
                for p in sorted(path.glob("*.json")) if p.name != MANIFEST_NAME}
    return {"manifest": manifest, "payloads": payloads}

"""Tests for report sanitizing, digests and bundle emission"""

import json

import numpy as np
import pandas as pd
import pytest

from components.errors import ConfigurationError
from components.reports import MANIFEST_NAME, ReportBundle, canonical_json, config_digest, load_bundle, sanitize
from config.lab_config import EmissionFormat, Verdict


class PassingReport:
    passed = True

    def to_dict(self):
        return {"value": np.float64(1.5)}


class TestSanitize:
    """JSON-safe payloads"""

    def test_non_finite_floats(self):
        assert sanitize([np.nan, np.inf, -np.inf, 1.0]) == ["nan", "inf", "-inf", 1.0]

    def test_complex_and_enum(self):
        assert sanitize(1.0 + 2.0j) == {"re": 1.0, "im": 2.0}
        assert sanitize(Verdict.FINITE) == "finite"

    def test_numpy_values(self):
        payload = sanitize({"a": np.arange(3), "b": np.bool_(True), 3: np.int64(4)})
        assert payload == {"a": [0, 1, 2], "b": True, "3": 4}


class TestDigest:
    """Canonical JSON and config digests"""

    def test_key_order_does_not_matter(self):
        assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})

    def test_digest_ignores_output_dir(self):
        assert config_digest({"seed": 1, "output_dir": "x"}) == config_digest({"seed": 1, "output_dir": "y"})
        assert config_digest({"seed": 1}) != config_digest({"seed": 2})


class TestReportBundle:
    """Collection and atomic writes"""

    def test_duplicate_name(self):
        bundle = ReportBundle("verify", {"seed": 1})
        bundle.add("a", PassingReport())
        with pytest.raises(ConfigurationError):
            bundle.add("a", PassingReport())

    def test_checks_follow_pass_flags(self):
        bundle = ReportBundle("verify", {"seed": 1})
        bundle.add("ok", PassingReport())
        bundle.add("info", {"x": 1})
        bundle.add_check("bad", False)
        assert set(bundle.checks) == {"ok", "bad"}
        assert not bundle.passed
        assert bundle.failing == ["bad"]

    def test_write_and_load(self, tmp_path):
        bundle = ReportBundle("verify", {"seed": 1})
        bundle.add("ok", PassingReport())
        bundle.add_table("rows", pd.DataFrame({"x": [1, 2]}))
        path = bundle.write(tmp_path, [EmissionFormat.JSON, EmissionFormat.CSV])
        assert path.name == f"verify-{config_digest({'seed': 1})}"
        assert (path / "rows.csv").read_text() == "x\n1\n2\n"
        loaded = load_bundle(path)
        assert loaded["manifest"]["passed"] is True
        assert loaded["manifest"]["reports"] == ["ok"]
        assert loaded["payloads"]["ok"]["report"] == {"value": 1.5}

    def test_rewrite_replaces_bundle(self, tmp_path):
        first = ReportBundle("verify", {"seed": 1})
        first.add("old", {"x": 1})
        first.write(tmp_path, [EmissionFormat.JSON])
        second = ReportBundle("verify", {"seed": 1})
        second.add("new", {"x": 2})
        path = second.write(tmp_path, [EmissionFormat.JSON])
        assert sorted(p.name for p in path.iterdir()) == [MANIFEST_NAME, "new.json"]
        assert [p.name for p in tmp_path.iterdir()] == [path.name]

    def test_refuses_foreign_directory(self, tmp_path):
        bundle = ReportBundle("verify", {"seed": 1})
        (tmp_path / f"verify-{config_digest({'seed': 1})}").mkdir()
        with pytest.raises(ConfigurationError):
            bundle.write(tmp_path, [EmissionFormat.JSON])
        assert len(list(tmp_path.iterdir())) == 1

    def test_manifest_is_valid_json(self, tmp_path):
        bundle = ReportBundle("solve", {"seed": None, "tol": float("nan")})
        path = bundle.write(tmp_path, [EmissionFormat.JSON])
        manifest = json.loads((path / MANIFEST_NAME).read_text())
        assert manifest["config"]["tol"] == "nan"
        assert manifest["subcommand"] == "solve"

    def test_load_requires_manifest(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_bundle(tmp_path)

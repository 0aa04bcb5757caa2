"""Tests for the command line: config layering, dispatch and exit codes"""

import pytest

import app
from components.errors import ConfigurationError
from components.reports import load_bundle
from config.lab_config import Backend

SMALL_CORPUS = "seeded:{n:4,depth:3,branching:2}"


def bundle_dirs(path):
    return [p for p in path.iterdir() if not p.name.startswith(".")]


class TestParseComplex:
    """λ parsing"""

    @pytest.mark.parametrize("value,expected", [("0.5,-1", 0.5 - 1j), ("2", 2 + 0j), (1.5, 1.5 + 0j),
                                                ([0, 1], 1j)])
    def test_accepted_forms(self, value, expected):
        assert app.parse_complex(value) == expected

    @pytest.mark.parametrize("value", ["a,b", "1,2,3"])
    def test_rejected_forms(self, value):
        with pytest.raises(ConfigurationError):
            app.parse_complex(value)


class TestBuildConfig:
    """Defaults, then config file, then flags"""

    def test_scenario_defaults(self):
        config = app.build_config(app.build_parser().parse_args(["verify"]))
        assert config.options["ineq"] == "fefferman"
        assert config.scenario == config.options["corpus"]

    def test_flags_override_config_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("p: 3.0\nseed: 9\nbackend: mc\nsolver:\n  tol: 1.0e-9\n")
        args = app.build_parser().parse_args(["verify", "--config", str(path), "--seed", "4"])
        config = app.build_config(args)
        assert config.options["p"] == 3.0
        assert config.seed == 4
        assert config.backend is Backend.MC
        assert config.solver.tol == 1e-9

    def test_unknown_nested_setting(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("solver:\n  tolerance: 1.0\n")
        with pytest.raises(ConfigurationError):
            app.build_config(app.build_parser().parse_args(["solve", "--config", str(path)]))


class TestMain:
    """End-to-end runs on small bundled inputs"""

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as info:
            app.main(["frobnicate"])
        assert info.value.code == 2

    def test_verify_writes_bundle(self, tmp_path):
        code = app.main(["verify", "--ineq", "fefferman", "--corpus", SMALL_CORPUS, "--seed", "1",
                         "--output-dir", str(tmp_path), "--format", "json", "csv"])
        assert code == 0
        [path] = bundle_dirs(tmp_path)
        assert path.name.startswith("verify-")
        loaded = load_bundle(path)
        assert loaded["manifest"]["passed"]
        assert (path / "verify-fefferman-table.csv").exists()

    def test_same_config_same_bundle(self, tmp_path):
        argv = ["verify", "--corpus", SMALL_CORPUS, "--seed", "1", "--output-dir", str(tmp_path)]
        assert app.main(argv) == 0
        assert app.main(argv) == 0
        assert len(bundle_dirs(tmp_path)) == 1

    def test_solve_bundled_spec(self, tmp_path):
        assert app.main(["solve", "--spec", "bundled:linear-small", "--kind", "bsde", "--uniqueness",
                         "--output-dir", str(tmp_path)]) == 0

    def test_linear_fundamental(self, tmp_path):
        assert app.main(["linear", "--op", "fundamental", "--output-dir", str(tmp_path)]) == 0

    def test_corpus_generate(self, tmp_path):
        assert app.main(["corpus", "generate", "--corpus", SMALL_CORPUS, "--output-dir", str(tmp_path)]) == 0
        [path] = bundle_dirs(tmp_path)
        assert len(load_bundle(path)["payloads"]["corpus"]["report"]) == 4

    def test_invalid_configuration_exits_two(self, tmp_path):
        assert app.main(["solve", "--spec", "bundled:cubic", "--output-dir", str(tmp_path)]) == 2

    def test_bad_log_level(self, tmp_path):
        assert app.main(["verify", "--corpus", SMALL_CORPUS, "--log-level", "chatty",
                         "--output-dir", str(tmp_path)]) == 2

"""Tests for the inequality verifiers and corpus runs"""

import json

import numpy as np
import pytest

from components.errors import ConfigurationError, EmptyEnsembleError, UnknownScenarioError
from components.filtration_tree import ProcessKind, TreeProcess, random_martingale, tree_to_document
from components.inequality_harness import (
    INEQUALITIES,
    duality_lower_bound,
    duality_probes,
    estimate_bdg_constants,
    make_report,
    parse_corpus,
    run_corpus,
    summarize,
    verify_emery,
    verify_kunita_watanabe,
    verify_linfty_bracket,
)

TOL = 1e-12


@pytest.fixture(scope="module")
def corpus():
    return parse_corpus("seeded:{n:8,depth:3,branching:3}", seed=5)


class TestReports:
    """Pass/fail and ratio rules"""

    def test_zero_over_zero(self):
        report = make_report("x", 0.0, 0.0)
        assert report.passed and report.ratio == 0.0

    def test_positive_over_zero_fails(self):
        report = make_report("x", 1e-3, 0.0)
        assert not report.passed and np.isinf(report.ratio)

    def test_tolerance_is_relative(self):
        assert make_report("x", 1.0 + 1e-11, 1.0).passed
        assert not make_report("x", 1.0 + 1e-9, 1.0).passed

    def test_serialized_key(self):
        assert make_report("x", 1.0, 2.0).to_dict()["pass"] is True


class TestVerifiers:
    """Closed forms and equality cases"""

    def test_kunita_watanabe_equality_case(self, coin):
        one = TreeProcess.constant(coin.tree, 1.0, ProcessKind.PREDICTABLE)
        report = verify_kunita_watanabe(coin, coin, one, one)
        assert report.passed
        assert report.ratio == pytest.approx(1.0, abs=TOL)

    def test_linfty_of_deterministic_bracket(self, coin):
        report = verify_linfty_bracket(coin, coin)
        assert report.lhs == pytest.approx(0.0, abs=TOL)
        assert report.passed

    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_emery_on_random_martingale(self, random_setup, p):
        _, m = random_setup
        report = verify_emery(m.base.running_max(), m, p)
        assert report.passed
        assert report.metadata["constant"] == (1.0 if p == 1.0 else pytest.approx(np.sqrt(2.0)))

    def test_duality_self_probe_on_coin(self, coin, rng):
        report = duality_lower_bound(coin, duality_probes(coin, rng, n=8))
        assert report.passed
        assert report.metadata["fraction"] == pytest.approx(1.0, abs=1e-9)

    def test_bdg_constants(self, random_setup, rng):
        tree, _ = random_setup
        estimate = estimate_bdg_constants(2.0, [random_martingale(tree, rng) for _ in range(10)])
        assert estimate.doob_passed
        assert 0.0 < estimate.c_hat <= estimate.C_hat
        assert estimate.corpus_size == 10

    def test_bdg_needs_non_constant_member(self, coin):
        zero = coin.scaled(0.0)
        with pytest.raises(EmptyEnsembleError):
            estimate_bdg_constants(2.0, [zero])


class TestCorpusRuns:
    """Every verifier over a seeded corpus"""

    @pytest.mark.parametrize("name", sorted(INEQUALITIES))
    def test_inequality_holds(self, corpus, name):
        reports = run_corpus(name, corpus, p=2.0, seed=1)
        summary = summarize(reports)
        assert summary["passed"] == summary["count"] == len(corpus)
        assert all(r.corpus_id for r in reports)

    def test_runs_are_reproducible(self, corpus):
        first = [r.lhs for r in run_corpus("fefferman", corpus, seed=3)]
        second = [r.lhs for r in run_corpus("fefferman", corpus, seed=3)]
        assert first == second

    def test_unknown_inequality(self, corpus):
        with pytest.raises(UnknownScenarioError):
            run_corpus("hardy", corpus)

    def test_empty_corpus(self):
        with pytest.raises(EmptyEnsembleError):
            run_corpus("fefferman", [])


class TestParseCorpus:
    """Seeded specifications and JSON documents"""

    def test_seeded(self, corpus):
        assert len(corpus) == 8
        assert all(member.tree.branching == 3 and member.tree.depth == 3 for member in corpus)

    def test_json_file(self, tmp_path, random_setup):
        tree, m = random_setup
        path = tmp_path / "trees.json"
        path.write_text(json.dumps([tree_to_document(tree, m), tree_to_document(tree)]))
        members = parse_corpus(str(path), seed=2)
        assert [member.corpus_id for member in members] == ["trees-0", "trees-1"]
        assert np.allclose(members[0].martingale.terminal, m.terminal)

    def test_unknown_source(self):
        with pytest.raises(ConfigurationError):
            parse_corpus("nowhere.json")

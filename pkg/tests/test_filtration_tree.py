"""Tests for the exact finite filtration engine"""

import networkx as nx
import numpy as np
import pytest

from components.errors import EnumerationLimitError, NotMartingaleError, ShapeMismatchError, TreeStructureError
from components.filtration_tree import (
    ProcessKind,
    TreeFiltration,
    TreeMartingale,
    TreeProcess,
    TreeStoppingTime,
    coin_martingale,
    conditional_expectation,
    count_stopping_times,
    covariation,
    enumerate_stopping_times,
    kw_decompose,
    random_martingale,
    random_predictable,
    random_tree,
    seeded_corpus,
    stochastic_integral,
    stopped,
    sup_by_enumeration,
    sup_over_stopping_times,
    tree_from_document,
    tree_to_document,
)

TOL = 1e-12


def assert_levels_close(a, b, tol=TOL, msg=""):
    for k, (x, y) in enumerate(zip(a.values, b.values)):
        gap = float(np.max(np.abs(np.asarray(x) - np.asarray(y)))) if np.size(x) else 0.0
        assert gap <= tol, f"{msg} level {k}: gap {gap:.3e}"


class TestTreeFiltration:
    """Construction and validation of uniform trees"""

    def test_uniform_tree_sizes(self, binary_tree):
        assert binary_tree.n_leaves == 8
        assert binary_tree.node_count == 15
        assert binary_tree.dt == pytest.approx(1.0 / 3.0)

    def test_leaf_probabilities_sum_to_one(self, random_setup):
        tree, _ = random_setup
        assert tree.leaf_probabilities().sum() == pytest.approx(1.0, abs=1e-14)

    def test_rejects_probabilities_not_summing_to_one(self):
        with pytest.raises(TreeStructureError):
            TreeFiltration(1, 2, (np.array([[0.5, 0.6]]),))

    def test_rejects_zero_probability(self):
        with pytest.raises(TreeStructureError):
            TreeFiltration(1, 2, (np.array([[0.0, 1.0]]),))

    def test_rejects_wrong_level_count(self):
        with pytest.raises(TreeStructureError):
            TreeFiltration(2, 2, (np.array([[0.5, 0.5]]),))

    def test_unknown_generator(self, rng):
        with pytest.raises(TreeStructureError):
            random_tree(rng, 2, 2, "fractal")

    def test_graph_is_arborescence(self, binary_tree):
        G = binary_tree.to_graph()
        assert nx.is_arborescence(G)
        assert G.number_of_nodes() == binary_tree.node_count


class TestMartingales:
    """Martingale property, increments and brackets"""

    def test_coin_bracket_is_deterministic(self, coin):
        assert np.allclose(coin.bracket.terminal, 3.0)
        assert all(np.allclose(v, 1.0) for v in coin.step_bracket.values)
        assert coin.remaining_bracket().values[0][0] == pytest.approx(3.0)

    def test_optional_bracket_of_coin_equals_predictable(self, coin):
        assert np.allclose(coin.optional_bracket.terminal, coin.bracket.terminal)

    def test_rejects_biased_increments(self):
        tree = TreeFiltration.uniform(1, 2)
        with pytest.raises(NotMartingaleError) as info:
            TreeMartingale.from_increments(tree, [np.array([[1.0, 0.0]])])
        assert info.value.node == (0, 0)

    def test_conditional_expectation_is_martingale(self, random_setup, rng):
        tree, _ = random_setup
        leaves = rng.normal(size=tree.n_leaves)
        closed = conditional_expectation(leaves, tree=tree)
        TreeMartingale(closed)
        assert closed.values[0][0] == pytest.approx(tree.expectation(leaves), abs=TOL)

    def test_conditional_expectation_needs_tree_for_raw_arrays(self):
        with pytest.raises(ShapeMismatchError):
            conditional_expectation(np.zeros(4))

    def test_stochastic_integral_of_constant(self, random_setup):
        tree, m = random_setup
        two = TreeProcess.constant(tree, 2.0, ProcessKind.PREDICTABLE)
        assert_levels_close(stochastic_integral(two, m).base, m.minus_initial().base * 2.0, msg="2∘M")

    def test_bracket_is_self_covariation(self, random_setup):
        _, m = random_setup
        assert_levels_close(covariation(m, m), m.bracket, msg="<M,M>")

    def test_integral_bracket(self, random_setup, rng):
        tree, m = random_setup
        h = random_predictable(tree, rng)
        x = stochastic_integral(h, m)
        expected = [h.values[k] ** 2 * m.step_bracket.values[k] for k in range(tree.depth)]
        for k in range(tree.depth):
            assert np.allclose(x.step_bracket.values[k], expected[k], atol=TOL)


class TestKunitaWatanabe:
    """Projection of one martingale on another"""

    def test_decomposition_reconstructs_and_is_orthogonal(self, random_setup, rng):
        tree, m = random_setup
        n = random_martingale(tree, rng)
        kw = kw_decompose(n, m)
        rebuilt = stochastic_integral(kw.z, m) + kw.n_perp
        assert_levels_close(rebuilt.base, n.minus_initial().base, tol=1e-10, msg="z∘M + N⊥")
        cross = covariation(m, kw.n_perp)
        assert max(float(np.max(np.abs(v))) for v in cross.values) <= 1e-12

    def test_degenerate_nodes_get_zero(self, rng):
        tree = TreeFiltration.uniform(2, 2)
        flat = TreeMartingale.zero(tree)
        n = random_martingale(tree, rng)
        kw = kw_decompose(n, flat)
        assert len(kw.degenerate_nodes) == 3
        assert all(np.all(v == 0) for v in kw.z.values)


class TestStoppingTimes:
    """Stopping times, stopped processes and the enumeration oracle"""

    @pytest.mark.parametrize("depth,branching,count", [(1, 2, 2), (2, 2, 5), (2, 3, 9), (3, 2, 26)])
    def test_count(self, depth, branching, count):
        assert count_stopping_times(depth, branching) == count

    def test_enumeration_matches_count(self):
        tree = TreeFiltration.uniform(2, 3)
        assert sum(1 for _ in enumerate_stopping_times(tree)) == count_stopping_times(2, 3)

    def test_enumeration_limit(self):
        with pytest.raises(EnumerationLimitError):
            next(enumerate_stopping_times(TreeFiltration.uniform(6, 3)))

    def test_path_must_stop(self, binary_tree):
        flags = tuple(np.zeros(binary_tree.level_size(k), dtype=bool) for k in range(4))
        with pytest.raises(TreeStructureError):
            TreeStoppingTime(binary_tree, flags)

    def test_stopped_process_freezes(self, coin):
        tau = TreeStoppingTime.deterministic(coin.tree, 1)
        frozen = stopped(coin.base, tau)
        assert np.allclose(frozen.terminal, np.repeat(coin.values[1], 4))
        assert np.array_equal(tau.stop_levels(), np.ones(8, dtype=int))

    def test_hitting_time(self, coin):
        tau = TreeStoppingTime.hitting(coin.base, lambda v: v >= 2.0)
        levels = tau.stop_levels()
        assert levels[0] == 2
        assert levels[-1] == 3

    def test_node_sup_matches_enumeration(self, rng):
        tree = random_tree(rng, 3, 2, "random")
        m = random_martingale(tree, rng)
        remaining = m.remaining_bracket()
        brute = sup_by_enumeration(tree, lambda tau: tau.value_at(remaining))
        assert brute == pytest.approx(sup_over_stopping_times(remaining), abs=TOL)


class TestDocuments:
    """Tree documents and seeded corpora"""

    def test_document_roundtrip(self, random_setup):
        tree, m = random_setup
        tree2, m2 = tree_from_document(tree_to_document(tree, m))
        assert tree2.depth == tree.depth and tree2.branching == tree.branching
        assert np.allclose(m2.terminal, m.terminal, atol=TOL)

    def test_rejects_missing_children(self, binary_tree):
        doc = tree_to_document(binary_tree)
        doc["nodes"] = [n for n in doc["nodes"] if n["id"] != "3:7"]
        with pytest.raises(TreeStructureError):
            tree_from_document(doc)

    def test_rejects_two_roots(self, binary_tree):
        doc = tree_to_document(binary_tree)
        doc["nodes"][1]["parent"] = None
        with pytest.raises(TreeStructureError):
            tree_from_document(doc)

    def test_seeded_corpus_is_deterministic(self):
        first = seeded_corpus(3, 3, 2, seed=4)
        second = seeded_corpus(3, 3, 2, seed=4)
        for a, b in zip(first, second):
            assert a.corpus_id == b.corpus_id
            assert np.array_equal(a.martingale.terminal, b.martingale.terminal)

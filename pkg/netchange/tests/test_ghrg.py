import math

import numpy as np
import pytest
import torch
from scipy import integrate

from netchange.fit import random_binary_tree
from netchange.ghrg import (
    BetaParams,
    Dendrogram,
    GhrgModel,
    ModelError,
    NodeCounts,
    beta_binomial_log_marginal,
    count_pairs,
    log_likelihood,
    log_marginal,
    model_from_document,
    model_to_document,
    posterior_mean,
    posterior_update,
    sample_graph,
    window_counts,
)
from netchange.graphs import GraphSnapshot, GraphWindow
from netchange.modes import PLUG_IN, POSTERIOR_DRAW


def random_graph(n, p, rng, time=0):
    rows, cols = np.triu_indices(n, 1)
    keep = rng.random(rows.shape[0]) < p
    return GraphSnapshot(time, n, set(zip(rows[keep].tolist(), cols[keep].tolist())))


def random_tree(n, rng):
    """random binary tree with a random subset of its clades collapsed"""
    masks = random_binary_tree(n, rng).masks()[n:]
    return Dendrogram(n, [m for m in masks if rng.random() < 0.6])


class TestDendrogram:
    def test_two_groups(self):
        tree = Dendrogram.from_leaf_sets(4, [[0, 1], [2, 3]])
        assert tree.num_internal == 3
        assert tree.leaves(0) == [0, 1, 2, 3]
        assert tree.leaves(1) == [0, 1]
        assert tree.leaves(2) == [2, 3]
        assert tree.children[0] == (5, 6)
        assert list(tree.possible_pairs) == [4, 1, 1]
        assert tree.depth == 2
        assert tree.pair_node[0, 1] == 1
        assert tree.pair_node[1, 2] == 0
        assert tree.pair_node[3, 3] == -1

    def test_star(self):
        tree = Dendrogram.star(4)
        assert tree.num_internal == 1
        assert list(tree.possible_pairs) == [6]
        assert tree.depth == 1
        assert Dendrogram.star(1).num_internal == 0

    def test_equality(self):
        a = Dendrogram.from_leaf_sets(4, [[2, 3], [0, 1]])
        b = Dendrogram.from_leaf_sets(4, [[0, 1], [2, 3], [0, 1, 2, 3]])
        assert a == b
        assert hash(a) == hash(b)
        assert a != Dendrogram.star(4)

    def test_invalid(self):
        with pytest.raises(ModelError):
            Dendrogram.from_leaf_sets(4, [[0, 1], [1, 2]])
        with pytest.raises(ModelError):
            Dendrogram.from_leaf_sets(4, [[0]])
        with pytest.raises(ModelError):
            Dendrogram.from_leaf_sets(3, [[0, 5]])

    def test_pair_conservation(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            tree = random_tree(n, rng)
            graph = random_graph(n, rng.random(), rng)
            counts = count_pairs(tree, graph)
            assert int(counts.pairs.sum()) == n * (n - 1) // 2
            assert int(counts.edges.sum()) == graph.num_edges
            assert torch.all(counts.edges <= counts.pairs)

    def test_relabel(self):
        rng = np.random.default_rng(1)
        n = 6
        tree = random_tree(n, rng)
        graph = random_graph(n, 0.4, rng)
        perm = rng.permutation(n)
        relabelled_tree = Dendrogram.from_leaf_sets(
            n, [[perm[v] for v in tree.leaves(k)] for k in range(tree.num_internal)]
        )
        relabelled = GraphSnapshot(0, n, {(perm[u], perm[v]) for u, v in graph.edges})
        prior = BetaParams()
        assert math.isclose(
            log_marginal(tree, count_pairs(tree, graph), prior),
            log_marginal(relabelled_tree, count_pairs(relabelled_tree, relabelled), prior),
            abs_tol=1e-12,
        )


class TestLikelihood:
    def test_log_likelihood(self):
        tree = Dendrogram.star(4)
        graph = GraphSnapshot(0, 4, {(0, 1), (2, 3)})
        assert math.isclose(log_likelihood(tree, [0.5], graph), 6 * math.log(0.5))
        assert math.isclose(log_likelihood(tree, {0: 1 / 3}, graph),
                            2 * math.log(1 / 3) + 4 * math.log(2 / 3))
        assert log_likelihood(tree, [0.0], graph) == -math.inf
        assert log_likelihood(tree, [0.0], GraphSnapshot(0, 4)) == 0.0

        with pytest.raises(ModelError):
            log_likelihood(tree, {1: 0.5}, graph)
        with pytest.raises(ValueError):
            log_likelihood(tree, [1.5], graph)

    def test_log_marginal_closed_form(self):
        # one node, 3 pairs, no edges: B(1, 4) / B(1, 1) = 1/4
        tree = Dendrogram.star(3)
        counts = count_pairs(tree, GraphSnapshot(0, 3))
        assert math.isclose(log_marginal(tree, counts, BetaParams()), math.log(0.25))

    def test_no_pairs(self):
        value = beta_binomial_log_marginal(0, 0, 2.0, 3.0)
        assert float(value) == 0.0
        tree = Dendrogram(1, [])
        counts = count_pairs(tree, GraphSnapshot(0, 1))
        assert log_marginal(tree, counts, BetaParams()) == 0.0

    def test_quadrature(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            tree = random_tree(n, rng)
            graph = random_graph(n, rng.random(), rng)
            counts = count_pairs(tree, graph)
            expected = 0.0
            for e, pairs in zip(counts.edges.tolist(), counts.pairs.tolist()):
                value, _ = integrate.quad(
                    lambda p: p ** e * (1 - p) ** (pairs - e),
                    0.0,
                    1.0,
                    epsabs=0.0,
                    epsrel=1e-12,
                    limit=200,
                )
                expected += math.log(value)
            assert math.isclose(
                log_marginal(tree, counts, BetaParams()), expected, abs_tol=1e-6
            )

    def test_invalid_counts(self):
        tree = Dendrogram.star(3)
        with pytest.raises(ModelError):
            log_marginal(tree, NodeCounts(torch.tensor([1, 1]), torch.tensor([3, 3])), BetaParams())
        with pytest.raises(ValueError):
            log_marginal(tree, NodeCounts(torch.tensor([4]), torch.tensor([3])), BetaParams())


class TestPosterior:
    def test_update(self):
        tree = Dendrogram.from_leaf_sets(4, [[0, 1], [2, 3]])
        graphs = [GraphSnapshot(0, 4, {(0, 1), (0, 2)}), GraphSnapshot(1, 4, {(0, 1)})]
        params = posterior_update(BetaParams(1.0, 2.0), [count_pairs(tree, g) for g in graphs])
        assert params.alpha.tolist() == [2.0, 3.0, 1.0]
        assert params.beta.tolist() == [2.0 + 7.0, 2.0, 4.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            posterior_update(BetaParams(), [])
        params = posterior_update(BetaParams(2.0, 3.0), [], num_internal=2)
        assert params.alpha.tolist() == [2.0, 2.0]
        assert params.beta.tolist() == [3.0, 3.0]

    def test_mismatched_trees(self):
        g = GraphSnapshot(0, 4, {(0, 1)})
        with pytest.raises(ModelError):
            posterior_update(
                BetaParams(),
                [count_pairs(Dendrogram.star(4), g),
                 count_pairs(Dendrogram.from_leaf_sets(4, [[0, 1]]), g)],
            )

    def test_posterior_mean(self):
        assert float(posterior_mean(BetaParams(1.0, 3.0))) == 0.25
        tree = Dendrogram.from_leaf_sets(4, [[0, 1], [2, 3]])
        params = posterior_update(BetaParams(), [count_pairs(tree, GraphSnapshot(0, 4, {(0, 1)}))])
        assert posterior_mean(params).tolist() == pytest.approx([1 / 6, 2 / 3, 1 / 3])

    def test_invalid_prior(self):
        with pytest.raises(ValueError):
            BetaParams(0.0, 1.0)


class TestGhrgModel:
    def make_window(self):
        snaps = [
            GraphSnapshot(0, 4, {(0, 1), (2, 3)}),
            GraphSnapshot(1, 4, {(0, 1)}),
        ]
        return GraphWindow(1, 2, snaps)

    def test_from_window(self):
        tree = Dendrogram.from_leaf_sets(4, [[0, 1], [2, 3]])
        window = self.make_window()
        model = GhrgModel.from_window(tree, window, BetaParams())
        assert model.edges.tolist() == [0, 2, 1]
        assert model.alpha.tolist() == [1.0, 3.0, 2.0]
        assert model.beta.tolist() == [9.0, 1.0, 2.0]
        assert model.window == 2
        assert torch.allclose(model.probs, torch.tensor([0.1, 0.75, 0.5]).double())

        counts = window_counts(tree, window)
        assert counts.shape == torch.Size([2, 3])
        expected = beta_binomial_log_marginal(counts, model.pairs, model.alpha, model.beta).sum(-1)
        assert torch.allclose(model(counts), expected)

    def test_invalid(self):
        tree = Dendrogram.star(3)
        with pytest.raises(ModelError):
            GhrgModel(tree, [1.0, 1.0], [1.0])
        with pytest.raises(ModelError):
            GhrgModel(tree, [0.0], [1.0])

    def test_modes(self):
        model = GhrgModel.from_prior(Dendrogram.from_leaf_sets(4, [[0, 1]]), BetaParams())
        assert model.mode == PLUG_IN
        model.posterior_draw()
        assert model.mode == POSTERIOR_DRAW
        rng = np.random.default_rng(0)
        draws = model.node_probs(rng)
        assert draws.shape == (2,)
        assert not np.allclose(draws, model.probs.numpy())
        model.plug_in()
        assert np.allclose(model.node_probs(rng), [0.5, 0.5])

        with pytest.raises(AssertionError):
            model.mode = 5

    def test_sample_counts(self):
        tree = Dendrogram.from_leaf_sets(6, [[0, 1, 2], [3, 4, 5]])
        model = GhrgModel(tree, [1.0, 9.0, 1.0], [9.0, 1.0, 1.0])
        counts = model.sample_counts(5000, np.random.default_rng(3))
        assert counts.shape == (5000, 3)
        assert np.all(counts <= tree.possible_pairs)
        means = counts.mean(axis=0) / tree.possible_pairs
        assert np.allclose(means, model.probs.numpy(), atol=0.03)

    def test_sample_graph(self):
        model = GhrgModel.from_prior(Dendrogram.star(20), BetaParams())
        rng = np.random.default_rng(4)
        graphs = [sample_graph(model, rng, t) for t in range(50)]
        density = np.mean([g.num_edges for g in graphs]) / 190
        assert abs(density - 0.5) < 0.03
        assert graphs[7].time == 7
        assert sample_graph(GhrgModel.from_prior(Dendrogram.star(1), BetaParams()), rng).n == 1

    def test_document(self):
        tree = Dendrogram.from_leaf_sets(5, [[1, 3], [0, 2, 4]])
        window = GraphWindow(
            2, 3, [GraphSnapshot(t, 5, {(0, 2), (1, 3), (t, 4)} - {(4, 4)}) for t in range(3)]
        )
        model = GhrgModel.from_window(tree, window, BetaParams(0.5, 2.0))
        labels = ["e", "d", "c", "b", "a"]
        doc = model_to_document(model, labels)
        assert doc["n"] == 5
        assert doc["window"] == 3
        # children ordered by smallest leaf label
        assert [c.get("label") for c in doc["tree"]["children"][1]["children"]] == ["b", "d"]

        restored, restored_labels = model_from_document(doc)
        assert restored_labels == labels
        assert restored.tree == tree
        assert torch.equal(restored.alpha, model.alpha)
        assert torch.equal(restored.beta, model.beta)
        assert torch.equal(restored.edges, model.edges)

        doc["tree"]["pairs"] += 1
        with pytest.raises(ModelError):
            model_from_document(doc)

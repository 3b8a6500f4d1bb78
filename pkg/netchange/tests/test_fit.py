import itertools
import math
from collections import Counter

import numpy as np
import pytest

from netchange.fit import (
    BinaryDendrogram,
    BipartitionSample,
    DendrogramChain,
    RANDOM,
    FitConfig,
    clade_frequencies,
    consensus_tree,
    fit_ghrg,
    linkage_tree,
    mcmc_step,
    random_binary_tree,
    sample_posterior,
    window_score,
)
from netchange.ghrg import BetaParams, Dendrogram, ModelError
from netchange.graphs import GraphSnapshot, GraphWindow, window_at
from netchange.synth import ChangeSpec, generate_sequence

FAST = FitConfig(burn_in_sweeps=20, n_samples=20, sample_interval_sweeps=2)


def mask(*leaves):
    return sum(1 << v for v in leaves)


def small_window():
    snaps = [
        GraphSnapshot(0, 4, {(0, 1), (2, 3)}),
        GraphSnapshot(1, 4, {(0, 1), (2, 3), (0, 2)}),
    ]
    return GraphWindow(1, 2, snaps)


def two_cliques(n_half=4, w=4):
    left = list(itertools.combinations(range(n_half), 2))
    right = [(u + n_half, v + n_half) for u, v in left]
    snaps = [GraphSnapshot(t, 2 * n_half, set(left + right)) for t in range(w)]
    return GraphWindow(w - 1, w, snaps)


def all_topologies_n4():
    """clade sets of the 15 rooted binary trees on 4 leaves"""
    leaves = range(4)
    full = mask(*leaves)
    trees = set()
    for a, b in itertools.combinations(leaves, 2):
        c, d = [v for v in leaves if v not in (a, b)]
        trees.add(frozenset({mask(a, b), mask(c, d), full}))
        trees.add(frozenset({mask(a, b), mask(a, b, c), full}))
        trees.add(frozenset({mask(a, b), mask(a, b, d), full}))
    return trees


def exact_posterior_n4(window, prior):
    """posterior probability of every rooted binary tree on 4 leaves"""
    topologies = all_topologies_n4()
    scores = {t: window_score(Dendrogram(4, t), window, prior) for t in topologies}
    top = max(scores.values())
    z = sum(math.exp(s - top) for s in scores.values())
    return {t: math.exp(s - top) / z for t, s in scores.items()}


class TestBinaryDendrogram:
    def test_random_tree(self):
        rng = np.random.default_rng(0)
        for n in range(2, 10):
            tree = random_binary_tree(n, rng)
            masks = tree.masks()
            assert masks[tree.root] == (1 << n) - 1
            clades = tree.bipartitions().clades
            assert len(clades) == n - 1
            # a full binary tree is its own consensus
            assert tree.to_dendrogram().num_internal == n - 1

        with pytest.raises(ValueError):
            random_binary_tree(1, rng)

    def test_random_tree_uniform(self):
        rng = np.random.default_rng(6)
        draws = 30000
        counts = Counter(random_binary_tree(3, rng).bipartitions().clades for _ in range(draws))
        assert len(counts) == 3
        for k in counts.values():
            assert k / draws == pytest.approx(1 / 3, abs=0.01)

        a = random_binary_tree(12, np.random.default_rng(7))
        b = random_binary_tree(12, np.random.default_rng(7))
        assert np.array_equal(a.children, b.children)
        assert a.root == b.root

    def test_linkage_tree(self):
        tree = linkage_tree(two_cliques(4, 3))
        assert tree.masks()[tree.root] == mask(*range(8))
        clades = tree.bipartitions().clades
        assert mask(0, 1, 2, 3) in clades
        assert mask(4, 5, 6, 7) in clades
        with pytest.raises(ValueError):
            linkage_tree(GraphWindow(1, 2, [GraphSnapshot(0, 1), GraphSnapshot(1, 1)]))

    def test_invalid(self):
        with pytest.raises(ModelError):
            BinaryDendrogram(3, [[0, 1], [2, 3]], root=3)

    def test_mcmc_step_keeps_state(self):
        rng = np.random.default_rng(1)
        state = random_binary_tree(4, rng)
        before = state.children.copy()
        for _ in range(20):
            new = mcmc_step(state, small_window(), BetaParams(), rng)
            assert np.array_equal(state.children, before)
            assert len(new.bipartitions().clades) == 3


class TestDendrogramChain:
    def test_incremental_score(self):
        rng = np.random.default_rng(2)
        snaps = []
        for t in range(3):
            rows, cols = np.triu_indices(9, 1)
            keep = rng.random(rows.shape[0]) < 0.3
            snaps.append(GraphSnapshot(t, 9, set(zip(rows[keep].tolist(), cols[keep].tolist()))))
        window = GraphWindow(2, 3, snaps)
        prior = BetaParams(0.7, 1.3)
        chain = DendrogramChain(random_binary_tree(9, rng), window, prior)
        for _ in range(10):
            chain.sweep(rng, 5)
            exact = window_score(chain.tree.to_dendrogram(), window, prior)
            assert math.isclose(chain.score, exact, abs_tol=1e-8)
            assert chain.bipartitions() == chain.tree.bipartitions()
        assert 0.0 < chain.acceptance_rate <= 1.0

    def test_stationary_distribution(self):
        window = small_window()
        prior = BetaParams()
        topologies = all_topologies_n4()
        assert len(topologies) == 15
        target = exact_posterior_n4(window, prior)

        rng = np.random.default_rng(3)
        chain = DendrogramChain(random_binary_tree(4, rng), window, prior)
        for _ in range(1000):
            chain.step(rng)
        counts = Counter()
        steps = 200000
        for _ in range(steps):
            chain.step(rng)
            counts[chain.bipartitions().clades] += 1
        tv = 0.5 * sum(abs(counts[t] / steps - target[t]) for t in topologies)
        assert tv < 0.03


class TestConsensus:
    def test_identical_samples(self):
        rng = np.random.default_rng(4)
        sample = random_binary_tree(7, rng).bipartitions()
        tree = consensus_tree([sample] * 9)
        assert tree == Dendrogram(7, sample.clades)
        assert tree.num_internal == 6

    def test_distinct_samples_give_star(self):
        full = mask(0, 1, 2, 3)
        samples = [
            BipartitionSample(4, frozenset({mask(0, 1), mask(0, 1, 2), full})),
            BipartitionSample(4, frozenset({mask(2, 3), mask(1, 2, 3), full})),
            BipartitionSample(4, frozenset({mask(0, 3), mask(0, 2, 3), full})),
        ]
        assert consensus_tree(samples) == Dendrogram.star(4)

    def test_strict_majority(self):
        full = mask(0, 1, 2, 3)
        a = BipartitionSample(4, frozenset({mask(0, 1), mask(2, 3), full}))
        b = BipartitionSample(4, frozenset({mask(0, 1), mask(0, 1, 2), full}))
        c = BipartitionSample(4, frozenset({mask(2, 3), mask(1, 2, 3), full}))
        assert clade_frequencies([a, b, c])[mask(0, 1)] == 2
        assert full not in clade_frequencies([a])
        assert consensus_tree([a, b, c]) == Dendrogram(4, [mask(0, 1), mask(2, 3)])
        # an even split is not a majority
        assert consensus_tree([b, c]) == Dendrogram.star(4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            consensus_tree([])
        with pytest.raises(ValueError):
            consensus_tree(
                [BipartitionSample(3, frozenset()), BipartitionSample(4, frozenset())]
            )


class TestFit:
    def test_config(self):
        with pytest.raises(ValueError):
            FitConfig(burn_in_sweeps=0)
        with pytest.raises(ValueError):
            FitConfig(seed=-1)
        with pytest.raises(ValueError):
            FitConfig(init="greedy")

    def test_deterministic(self):
        window = two_cliques(3, 2)
        a = sample_posterior(window, BetaParams(), FAST)
        b = sample_posterior(window, BetaParams(), FAST)
        assert a == b
        assert len(a) == FAST.n_samples

    def test_chains_independent_of_workers(self):
        window = two_cliques(3, 2)
        serial = FitConfig(burn_in_sweeps=5, n_samples=5, sample_interval_sweeps=1, n_chains=2)
        parallel = FitConfig(
            burn_in_sweeps=5, n_samples=5, sample_interval_sweeps=1, n_chains=2, workers=2
        )
        samples = sample_posterior(window, BetaParams(), serial)
        assert len(samples) == 10
        assert samples == sample_posterior(window, BetaParams(), parallel)

    def test_single_vertex(self):
        window = GraphWindow(1, 2, [GraphSnapshot(0, 1), GraphSnapshot(1, 1)])
        model = fit_ghrg(window, BetaParams(), FAST)
        assert model.tree.num_internal == 0

    def test_recovers_two_groups(self):
        cfg = FitConfig(burn_in_sweeps=200, n_samples=20, sample_interval_sweeps=2, n_chains=3)
        model = fit_ghrg(two_cliques(4, 4), BetaParams(), cfg)
        clades = model.tree.clade_set
        assert mask(0, 1, 2, 3) in clades
        assert mask(4, 5, 6, 7) in clades
        root = model.tree.clades.index(mask(*range(8)))
        assert model.edges[root] == 0
        assert model.window == 4

    def test_posterior_clade_frequencies(self):
        window = small_window()
        prior = BetaParams()
        target = exact_posterior_n4(window, prior)
        cfg = FitConfig(burn_in_sweeps=50, n_samples=20000, sample_interval_sweeps=2, n_chains=2)
        samples = sample_posterior(window, prior, cfg)
        assert len(samples) == 40000
        counts = clade_frequencies(samples)
        clades = {c for t in target for c in t if c != mask(0, 1, 2, 3)}
        assert len(clades) == 10
        for c in clades:
            expected = sum(p for t, p in target.items() if c in t)
            assert counts[c] / len(samples) == pytest.approx(expected, abs=0.02), c

    def test_random_start(self):
        cfg = FitConfig(burn_in_sweeps=200, n_samples=20, sample_interval_sweeps=2, init=RANDOM)
        clades = fit_ghrg(two_cliques(4, 4), BetaParams(), cfg).tree.clade_set
        assert mask(0, 1, 2, 3) in clades
        assert mask(4, 5, 6, 7) in clades

    def test_complete_graphs_give_star(self):
        n, w = 6, 3
        pairs = set(itertools.combinations(range(n), 2))
        window = GraphWindow(w - 1, w, [GraphSnapshot(t, n, pairs) for t in range(w)])
        prior = BetaParams(2.0, 0.5)
        cfg = FitConfig(burn_in_sweeps=50, n_samples=100, sample_interval_sweeps=2)
        model = fit_ghrg(window, prior, cfg)
        assert model.tree == Dendrogram.star(n)
        assert float(model.alpha[0]) == pytest.approx(2.0 + w * n * (n - 1) / 2)
        assert float(model.beta[0]) == pytest.approx(0.5)
        assert int(model.edges[0]) == w * n * (n - 1) // 2

    def test_planted_groups_from_linkage_start(self):
        spec = ChangeSpec.for_delta("merge", 0.45, seed=1)
        seq, _ = generate_sequence(spec)
        window = window_at(seq, 3, 4)
        groups = (mask(*range(15)), mask(*range(15, 30)))
        start = linkage_tree(window).bipartitions().clades
        assert all(g in start for g in groups)
        clades = fit_ghrg(window, BetaParams(), FAST).tree.clade_set
        assert all(g in clades for g in groups)

import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import FrozenSet, List, NamedTuple

import numpy as np
import torch
from scipy.cluster import hierarchy
from scipy.spatial.distance import squareform

from . import rng as rng_streams
from .ghrg import (
    BetaParams,
    Dendrogram,
    GhrgModel,
    ModelError,
    beta_binomial_log_marginal,
    bits,
    window_counts,
)
from .graphs import GraphWindow

logger = logging.getLogger(__name__)

LINKAGE = "linkage"
RANDOM = "random"
INITS = (LINKAGE, RANDOM)


@dataclass(frozen=True)
class FitConfig:
    """
    MCMC schedule for fitting a GHRG to a window. One sweep is n proposals
    for a window over n vertices.

    Chains start from the average-linkage tree of the window ("linkage") or
    from a uniformly random tree ("random"). Random starts on windows with
    strong group structure often stall in a local mode far below the
    planted tree.
    """

    burn_in_sweeps: int = 200
    n_samples: int = 100
    sample_interval_sweeps: int = 5
    seed: int = 0
    n_chains: int = 1
    workers: int = 1
    init: str = LINKAGE

    def __post_init__(self):
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        for name in ("burn_in_sweeps", "n_samples", "sample_interval_sweeps",
                     "n_chains", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


class BipartitionSample(NamedTuple):
    """clades (leaf bitmasks) of one sampled binary tree over n leaves"""

    n: int
    clades: FrozenSet[int]


class BinaryDendrogram:
    """
    Full binary tree over leaves 0..n-1. Internal node ids are n..2n-2 and
    `children[id - n]` holds the two child ids; `parent[id]` is -1 at the root.
    """

    def __init__(self, n: int, children: np.ndarray, root: int):
        if n < 2:
            raise ValueError(f"a binary dendrogram needs at least 2 leaves, got {n}")
        self.n = n
        self.children = np.asarray(children, dtype=np.int64).reshape(n - 1, 2)
        self.root = int(root)
        self.parent = np.full(2 * n - 1, -1, dtype=np.int64)
        for k, (a, b) in enumerate(self.children):
            self.parent[a] = n + k
            self.parent[b] = n + k
        if self.parent[self.root] != -1 or np.sum(self.parent == -1) != 1:
            raise ModelError("binary dendrogram must have exactly one root")

    def copy(self) -> "BinaryDendrogram":
        return BinaryDendrogram(self.n, self.children.copy(), self.root)

    def masks(self) -> List[int]:
        """leaf bitmask of every node id"""
        out = [1 << i for i in range(self.n)] + [0] * (self.n - 1)
        stack = [(self.root, False)]
        while stack:
            node, ready = stack.pop()
            if node < self.n:
                continue
            a, b = self.children[node - self.n]
            if ready:
                out[node] = out[a] | out[b]
            else:
                stack += [(node, True), (a, False), (b, False)]
        return out

    def bipartitions(self) -> BipartitionSample:
        return BipartitionSample(self.n, frozenset(self.masks()[self.n:]))

    def to_dendrogram(self) -> Dendrogram:
        return Dendrogram(self.n, self.masks()[self.n:])


def random_binary_tree(n: int, rng: np.random.Generator) -> BinaryDendrogram:
    """
    Uniformly random rooted leaf-labelled binary tree, built by inserting leaf
    k on a uniformly chosen edge (including the edge above the root) of the
    tree over leaves 0..k-1.
    """
    if n < 2:
        raise ValueError(f"a binary dendrogram needs at least 2 leaves, got {n}")
    children = np.zeros((n - 1, 2), dtype=np.int64)
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    root = 0
    for k in range(1, n):
        new = n + k - 1
        existing = list(range(k)) + list(range(n, new))
        x = existing[int(rng.integers(len(existing)))]
        px = parent[x]
        children[new - n] = (x, k)
        parent[x] = parent[k] = new
        parent[new] = px
        if px == -1:
            root = new
        else:
            slot = 0 if children[px - n, 0] == x else 1
            children[px - n, slot] = new
    return BinaryDendrogram(n, children, root)


def linkage_tree(window: GraphWindow) -> BinaryDendrogram:
    """
    Average-linkage tree of the window, with 1 - (fraction of snapshots in
    which a pair is linked) as the distance between two vertices.
    """
    n = window.n
    if n < 2:
        raise ValueError(f"a binary dendrogram needs at least 2 leaves, got {n}")
    distance = 1.0 - window.aggregate_adjacency() / window.w
    np.fill_diagonal(distance, 0.0)
    merges = hierarchy.linkage(squareform(distance, checks=False), method="average")
    # scipy numbers the cluster formed by merge k as n + k, like internal node ids here
    return BinaryDendrogram(n, merges[:, :2].astype(np.int64), 2 * n - 2)


class DendrogramChain:
    def __init__(self, tree: BinaryDendrogram, window: GraphWindow, prior: BetaParams):
        """
        Metropolis-Hastings chain over binary dendrograms with nearest neighbour
        interchange moves.

        The target is the marginal likelihood of the whole window under one
        shared probability per internal node: each node contributes the
        Beta-Binomial evidence of its window edge count sum_t E_r out of
        w * N_r possible pairs. Log-gamma values are tabulated once per window,
        so a proposal costs one block sum over the adjacency matrix.
        """
        if window.n != tree.n:
            raise ModelError(
                f"tree has {tree.n} leaves, window has {window.n} vertices"
            )
        self.tree = tree.copy()
        self.n = tree.n
        self.w = window.w
        self.adjacency = window.aggregate_adjacency()

        top = self.w * math.comb(self.n, 2)
        grid = torch.arange(top + 1, dtype=torch.double)
        self._lg_alpha = torch.lgamma(grid + prior.alpha).tolist()
        self._lg_beta = torch.lgamma(grid + prior.beta).tolist()
        self._lg_both = torch.lgamma(grid + prior.alpha + prior.beta).tolist()
        self._const = float(
            torch.lgamma(torch.tensor(prior.alpha + prior.beta, dtype=torch.double))
            - torch.lgamma(torch.tensor(prior.alpha, dtype=torch.double))
            - torch.lgamma(torch.tensor(prior.beta, dtype=torch.double))
        )

        n = self.n
        self.masks = self.tree.masks()
        self.leaves = [np.array(bits(m), dtype=np.int64) for m in self.masks]
        self.sizes = [len(v) for v in self.leaves]
        self.edge_counts = [0] * (n - 1)
        for k, (a, b) in enumerate(self.tree.children):
            self.edge_counts[k] = self._edges_between(a, b)
        self.movable = [node for node in range(n, 2 * n - 1) if node != self.tree.root]
        self.score = sum(
            self.node_score(self.edge_counts[k], self.sizes[a] * self.sizes[b])
            for k, (a, b) in enumerate(self.tree.children)
        )
        self.proposed = 0
        self.accepted = 0

    def _edges_between(self, a: int, b: int) -> int:
        return int(self.adjacency[np.ix_(self.leaves[a], self.leaves[b])].sum())

    def node_score(self, edges: int, pairs: int) -> float:
        total = self.w * pairs
        return (
            self._const
            + self._lg_alpha[edges]
            + self._lg_beta[total - edges]
            - self._lg_both[total]
        )

    def step(self, rng: np.random.Generator) -> bool:
        """one NNI proposal; returns True when accepted"""
        if not self.movable:
            return True
        n = self.n
        children = self.tree.children
        v = self.movable[int(rng.integers(len(self.movable)))]
        p = int(self.tree.parent[v])
        pv = children[p - n]
        c = int(pv[1] if pv[0] == v else pv[0])
        i = int(rng.integers(2))
        x, y = int(children[v - n, i]), int(children[v - n, 1 - i])
        u = rng.random()

        sx, sy, sc = self.sizes[x], self.sizes[y], self.sizes[c]
        e_xy = self.edge_counts[v - n]
        e_p = self.edge_counts[p - n]
        e_xc = self._edges_between(x, c)
        e_yc = e_p - e_xc

        delta = (
            self.node_score(e_yc, sc * sy)
            + self.node_score(e_xc + e_xy, (sc + sy) * sx)
            - self.node_score(e_xy, sx * sy)
            - self.node_score(e_p, (sx + sy) * sc)
        )
        self.proposed += 1
        if delta < 0 and u >= math.exp(delta):
            return False

        # swap x (child of v) with c (sibling of v)
        children[v - n] = (c, y)
        children[p - n] = (v, x)
        self.tree.parent[c] = v
        self.tree.parent[x] = p
        self.masks[v] = self.masks[c] | self.masks[y]
        self.leaves[v] = np.concatenate((self.leaves[c], self.leaves[y]))
        self.sizes[v] = sc + sy
        self.edge_counts[v - n] = e_yc
        self.edge_counts[p - n] = e_xc + e_xy
        self.score += delta
        self.accepted += 1
        return True

    def sweep(self, rng: np.random.Generator, sweeps: int = 1):
        for _ in range(sweeps * self.n):
            self.step(rng)

    def bipartitions(self) -> BipartitionSample:
        return BipartitionSample(self.n, frozenset(self.masks[self.n:]))

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def window_score(tree: Dendrogram, window: GraphWindow, prior: BetaParams) -> float:
    """
    The chain's target: log evidence of the whole window with one shared
    connection probability per internal node.
    """
    edges = window_counts(tree, window).sum(dim=0)
    pairs = window.w * torch.as_tensor(tree.possible_pairs)
    return float(
        beta_binomial_log_marginal(edges, pairs, prior.alpha, prior.beta).sum()
    )


def mcmc_step(
    state: BinaryDendrogram,
    window: GraphWindow,
    prior: BetaParams,
    rng: np.random.Generator,
) -> BinaryDendrogram:
    """single Metropolis-Hastings NNI step from `state`; `state` is not modified"""
    chain = DendrogramChain(state, window, prior)
    chain.step(rng)
    return chain.tree


def _run_chain(window: GraphWindow, prior: BetaParams, cfg: FitConfig, chain_index: int):
    gen = rng_streams.derive_rng(cfg.seed, rng_streams.FIT, chain_index)
    if cfg.init == LINKAGE:
        start = linkage_tree(window)
    else:
        start = random_binary_tree(window.n, gen)
    chain = DendrogramChain(start, window, prior)
    chain.sweep(gen, cfg.burn_in_sweeps)
    samples = []
    for _ in range(cfg.n_samples):
        chain.sweep(gen, cfg.sample_interval_sweeps)
        samples.append(chain.bipartitions())
    logger.debug(
        "chain %d: %d proposals, acceptance %.3f, final score %.4f",
        chain_index,
        chain.proposed,
        chain.acceptance_rate,
        chain.score,
    )
    return samples


def sample_posterior(
    window: GraphWindow, prior: BetaParams, cfg: FitConfig = FitConfig()
) -> List[BipartitionSample]:
    """
    Sample bipartition sets from the posterior over binary dendrograms of the
    window. Each of `cfg.n_chains` chains starts from the tree chosen by
    `cfg.init`, runs `burn_in_sweeps`, then records `n_samples` trees
    `sample_interval_sweeps` apart. Chains are merged in chain order.
    """
    if window.n < 2:
        return [BipartitionSample(window.n, frozenset())] * (cfg.n_samples * cfg.n_chains)

    chains = range(cfg.n_chains)
    if cfg.workers > 1 and cfg.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.n_chains)) as pool:
            results = list(
                pool.map(
                    _run_chain,
                    [window] * cfg.n_chains,
                    [prior] * cfg.n_chains,
                    [cfg] * cfg.n_chains,
                    chains,
                )
            )
    else:
        results = [_run_chain(window, prior, cfg, i) for i in chains]
    return [s for chain_samples in results for s in chain_samples]


def clade_frequencies(samples: List[BipartitionSample]) -> Counter:
    """number of samples containing each non-trivial clade"""
    counts = Counter()
    for sample in samples:
        full = (1 << sample.n) - 1
        counts.update(c for c in sample.clades if c != full and c & (c - 1))
    return counts


def consensus_tree(samples: List[BipartitionSample]) -> Dendrogram:
    """
    Majority-rule consensus: the tree holding exactly the non-trivial clades
    present in more than half of the samples. Strict-majority clades are
    always pairwise compatible.
    """
    if not samples:
        raise ValueError("consensus needs at least one sample")
    n = samples[0].n
    if any(s.n != n for s in samples):
        raise ValueError("all samples must be over the same leaf set")
    counts = clade_frequencies(samples)
    majority = [c for c, k in counts.items() if 2 * k > len(samples)]
    return Dendrogram(n, majority)


def fit_ghrg(
    window: GraphWindow, prior: BetaParams = BetaParams(), cfg: FitConfig = FitConfig()
) -> GhrgModel:
    """
    Fit a GHRG to a window under the no-change model: sample binary trees,
    reduce them to their majority consensus, then attach the posterior Beta
    hyperparameters of every consensus node computed from the window counts.
    """
    samples = sample_posterior(window, prior, cfg)
    tree = consensus_tree(samples)
    model = GhrgModel.from_window(tree, window, prior)
    logger.info(
        "fitted window ending at %d: %d internal nodes, depth %d",
        window.tau,
        tree.num_internal,
        tree.depth,
    )
    return model

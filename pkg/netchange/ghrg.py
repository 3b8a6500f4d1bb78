import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

from .graphs import GraphSnapshot, GraphWindow, NetChangeError
from .modes import POSTERIOR_DRAW, SamplingModeModule

logger = logging.getLogger(__name__)

tkwargs = {"dtype": torch.double, "device": "cpu"}


class ModelError(NetChangeError):
    pass


@dataclass(frozen=True)
class BetaParams:
    """Beta prior pseudo-counts of present (alpha) and absent (beta) edges."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(
                f"Beta hyperparameters must be positive, got ({self.alpha}, "
                f"{self.beta})"
            )


class NodeCounts(NamedTuple):
    """per internal node edge counts E_r and possible pair counts N_r"""

    edges: Tensor
    pairs: Tensor


class NodeParams(NamedTuple):
    """per internal node Beta hyperparameters"""

    alpha: Tensor
    beta: Tensor


def bits(mask: int) -> List[int]:
    """leaf ids set in a clade bitmask, ascending"""
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def lowest_bit(mask: int) -> int:
    return (mask & -mask).bit_length() - 1


class Dendrogram:
    """
    Rooted tree whose leaves are the vertex ids 0..n-1. Internal nodes have at
    least two children and are indexed 0..K-1 in canonical pre-order (root is
    0, children visited by smallest leaf id). In `children`, ids below n are
    leaves and id n + k is internal node k.

    A tree is fully determined by its set of clades (leaf sets of the internal
    nodes), which is what equality compares.
    """

    def __init__(self, n: int, clades: Iterable[int]):
        self.n = n
        full = (1 << n) - 1
        clade_set = {int(c) for c in clades}
        for c in clade_set:
            if c & ~full or bin(c).count("1") < 2:
                raise ModelError(f"invalid clade {bits(c)} for {n} leaves")
        if n >= 2:
            clade_set.add(full)

        # place clades from largest to smallest; laminar families nest cleanly
        ordered = sorted(clade_set, key=lambda c: (-bin(c).count("1"), c))
        owner = [-1] * n
        parent_of: Dict[int, int] = {}
        for c in ordered:
            leaves = bits(c)
            owners = {owner[leaf] for leaf in leaves}
            if len(owners) != 1:
                raise ModelError(f"clade {leaves} is incompatible with the tree")
            parent_of[c] = owners.pop()
            for leaf in leaves:
                owner[leaf] = c

        sub: Dict[int, List[int]] = {c: [] for c in ordered}
        for c, p in parent_of.items():
            if p >= 0:
                sub[p].append(c)

        # canonical pre-order numbering
        self.clades: Tuple[int, ...] = ()
        self.children: Tuple[Tuple[int, ...], ...] = ()
        if n < 2:
            return
        index: Dict[int, int] = {}
        order: List[int] = []
        stack = [full]
        while stack:
            c = stack.pop()
            index[c] = len(order)
            order.append(c)
            for child in sorted(sub[c], key=lowest_bit, reverse=True):
                stack.append(child)

        children = []
        for c in order:
            items = [(lowest_bit(s), n + index[s]) for s in sub[c]]
            items += [(leaf, leaf) for leaf in bits(c) if owner[leaf] == c]
            children.append(tuple(node for _, node in sorted(items)))
        self.clades = tuple(order)
        self.children = tuple(children)

    @classmethod
    def star(cls, n: int) -> "Dendrogram":
        """single internal node over all leaves (Erdos-Renyi structure)"""
        return cls(n, [])

    @classmethod
    def from_leaf_sets(cls, n: int, leaf_sets: Iterable[Iterable[int]]) -> "Dendrogram":
        return cls(n, [sum(1 << int(v) for v in s) for s in leaf_sets])

    def __eq__(self, other):
        if not isinstance(other, Dendrogram):
            return NotImplemented
        return self.n == other.n and set(self.clades) == set(other.clades)

    def __hash__(self):
        return hash((self.n, frozenset(self.clades)))

    def __repr__(self):
        return f"Dendrogram(n={self.n}, internal={self.num_internal})"

    @property
    def num_internal(self) -> int:
        return len(self.clades)

    @property
    def clade_set(self) -> frozenset:
        return frozenset(self.clades)

    def leaves(self, node: int) -> List[int]:
        """leaf ids under internal node index `node`"""
        return bits(self.clades[node])

    def size(self, node_id: int) -> int:
        """leaf count under a node id (leaf or n + internal index)"""
        if node_id < self.n:
            return 1
        return bin(self.clades[node_id - self.n]).count("1")

    @cached_property
    def parents(self) -> np.ndarray:
        """parent internal index per internal node, -1 for the root"""
        parent = np.full(self.num_internal, -1, dtype=np.int64)
        for k, kids in enumerate(self.children):
            for c in kids:
                if c >= self.n:
                    parent[c - self.n] = k
        return parent

    @cached_property
    def depth(self) -> int:
        """number of internal nodes on the longest root-to-leaf path"""
        if self.num_internal == 0:
            return 0
        levels = np.zeros(self.num_internal, dtype=np.int64)
        for k in range(self.num_internal):
            p = self.parents[k]
            levels[k] = 1 if p < 0 else levels[p] + 1
        return int(levels.max())

    @cached_property
    def pair_node(self) -> np.ndarray:
        """(n, n) array of the lowest common ancestor of every vertex pair"""
        lca = np.full((self.n, self.n), -1, dtype=np.int64)
        for k, kids in enumerate(self.children):
            groups = [self._node_leaves(c) for c in kids]
            for i in range(len(groups)):
                for j in range(i + 1, len(groups)):
                    lca[np.ix_(groups[i], groups[j])] = k
                    lca[np.ix_(groups[j], groups[i])] = k
        return lca

    @cached_property
    def pair_lca(self) -> np.ndarray:
        """lowest common ancestor of each pair in `np.triu_indices(n, 1)` order"""
        iu = np.triu_indices(self.n, 1)
        return self.pair_node[iu]

    @cached_property
    def possible_pairs(self) -> np.ndarray:
        """N_r per internal node"""
        return np.bincount(self.pair_lca, minlength=self.num_internal).astype(np.int64)

    def _node_leaves(self, node_id: int) -> List[int]:
        if node_id < self.n:
            return [node_id]
        return self.leaves(node_id - self.n)


def _check_tree_graph(tree: Dendrogram, graph: GraphSnapshot):
    if graph.n != tree.n:
        raise ModelError(
            f"tree has {tree.n} leaves but graph at time {graph.time} has {graph.n} "
            f"vertices"
        )


def count_pairs(tree: Dendrogram, graph: GraphSnapshot) -> NodeCounts:
    """
    Count, for each internal node r, the edges E_r whose endpoints have r as
    lowest common ancestor and the possible pairs N_r under r.
    """
    _check_tree_graph(tree, graph)
    e = graph.edge_array()
    lca = tree.pair_node[e[:, 0], e[:, 1]]
    edges = np.bincount(lca, minlength=tree.num_internal)
    return NodeCounts(
        torch.as_tensor(edges, dtype=torch.int64),
        torch.as_tensor(tree.possible_pairs, dtype=torch.int64),
    )


def window_counts(tree: Dendrogram, window: Union[GraphWindow, Sequence[GraphSnapshot]]) -> Tensor:
    """(w, K) tensor of per-snapshot edge counts for every internal node"""
    snapshots = window.snapshots if isinstance(window, GraphWindow) else window
    rows = [count_pairs(tree, g).edges for g in snapshots]
    if not rows:
        return torch.zeros(0, tree.num_internal, dtype=torch.int64)
    return torch.stack(rows)


def beta_binomial_log_marginal(edges, pairs, alpha, beta) -> Tensor:
    """
    Elementwise log of the Beta-Binomial evidence

        B(E + alpha, N - E + beta) / B(alpha, beta)

    for one specific arrangement of E present and N - E absent edges. Nodes
    without possible pairs contribute exactly 0. All arguments broadcast.
    """
    edges = torch.as_tensor(edges, **tkwargs)
    pairs = torch.as_tensor(pairs, **tkwargs)
    alpha = torch.as_tensor(alpha, **tkwargs)
    beta = torch.as_tensor(beta, **tkwargs)
    value = (
        torch.lgamma(alpha + beta)
        - torch.lgamma(alpha)
        - torch.lgamma(beta)
        + torch.lgamma(edges + alpha)
        + torch.lgamma(pairs - edges + beta)
        - torch.lgamma(pairs + alpha + beta)
    )
    return torch.where(pairs > 0, value, torch.zeros_like(value))


def _as_probs(probs, num_internal: int) -> Tensor:
    if isinstance(probs, dict):
        missing = set(range(num_internal)) - set(probs)
        if missing:
            raise ModelError(f"no probability for internal nodes {sorted(missing)}")
        probs = [probs[k] for k in range(num_internal)]
    probs = torch.as_tensor(probs, **tkwargs)
    if probs.shape != torch.Size([num_internal]):
        raise ModelError(
            f"expected {num_internal} node probabilities, got shape "
            f"{tuple(probs.shape)}"
        )
    if torch.any((probs < 0) | (probs > 1)):
        raise ValueError("node probabilities must lie in [0, 1]")
    return probs


def log_likelihood(tree: Dendrogram, probs, graph: GraphSnapshot) -> float:
    """
    Log-likelihood of `graph` under fixed node probabilities

        sum_r E_r log p_r + (N_r - E_r) log(1 - p_r)

    `probs` is a sequence/tensor indexed by internal node or a dict node->p.
    The result is -inf only when a probability of 0 or 1 contradicts the
    observed counts.
    """
    p = _as_probs(probs, tree.num_internal)
    counts = count_pairs(tree, graph)
    e = counts.edges.to(**tkwargs)
    absent = (counts.pairs - counts.edges).to(**tkwargs)
    return float(torch.sum(torch.xlogy(e, p) + torch.xlogy(absent, 1.0 - p)))


def _check_counts(tree: Dendrogram, counts: NodeCounts):
    if counts.edges.shape[-1] != tree.num_internal:
        raise ModelError(
            f"counts cover {counts.edges.shape[-1]} nodes, tree has "
            f"{tree.num_internal}"
        )
    if torch.any(counts.edges < 0) or torch.any(counts.pairs < 0):
        raise ValueError("edge and pair counts must be non-negative")
    if torch.any(counts.edges > counts.pairs):
        raise ValueError("edge counts cannot exceed possible pair counts")


def log_marginal(tree: Dendrogram, counts: NodeCounts, prior: BetaParams) -> float:
    """
    Marginal log-likelihood of one graph's counts with every p_r integrated out
    against an independent Beta(alpha, beta) prior.
    """
    _check_counts(tree, counts)
    return float(
        torch.sum(
            beta_binomial_log_marginal(
                counts.edges, counts.pairs, prior.alpha, prior.beta
            )
        )
    )


def posterior_update(
    prior: BetaParams,
    window_counts: Sequence[NodeCounts],
    num_internal: Optional[int] = None,
) -> NodeParams:
    """
    Posterior hyperparameters after observing a sequence of graphs on one tree:

        alpha_r = alpha + sum_t E_r(G_t)
        beta_r = beta + sum_t (N_r - E_r(G_t))
    """
    if len(window_counts) == 0:
        if num_internal is None:
            raise ValueError("num_internal is required for an empty window")
        ones = torch.ones(num_internal, **tkwargs)
        return NodeParams(prior.alpha * ones, prior.beta * ones)

    pairs = window_counts[0].pairs
    for c in window_counts[1:]:
        if c.pairs.shape != pairs.shape or not torch.equal(c.pairs, pairs):
            raise ModelError("window counts were computed on different trees")
    if num_internal is not None and pairs.shape[-1] != num_internal:
        raise ModelError(f"counts cover {pairs.shape[-1]} nodes, expected {num_internal}")

    edges = torch.stack([c.edges for c in window_counts]).to(**tkwargs)
    return update_params(prior, edges, pairs)


def update_params(prior: BetaParams, edges: Tensor, pairs: Tensor) -> NodeParams:
    """
    Batched posterior update. `edges` is (..., T, K) per-snapshot counts,
    `pairs` is (K,); the snapshot dimension is summed out.
    """
    edges = torch.as_tensor(edges, **tkwargs)
    pairs = torch.as_tensor(pairs, **tkwargs)
    total = edges.sum(dim=-2)
    steps = edges.shape[-2]
    return NodeParams(prior.alpha + total, prior.beta + steps * pairs - total)


def posterior_mean(params: Union[BetaParams, NodeParams]):
    """alpha / (alpha + beta), per node for NodeParams"""
    return params.alpha / (params.alpha + params.beta)


class GhrgModel(SamplingModeModule):
    def __init__(
        self,
        tree: Dendrogram,
        alpha: Tensor,
        beta: Tensor,
        edges: Tensor = None,
        window: int = 0,
    ):
        """
        Generalized hierarchical random graph: a dendrogram with a Beta
        distribution over the connection probability of every internal node.

        Calling the model on per-graph node counts returns each graph's
        marginal log-likelihood with the node probabilities integrated out
        against the model's Beta hyperparameters.

        Parameters
        ----------
        tree : Dendrogram
            Tree structure; its leaves are the vertex ids.

        alpha, beta : Tensor
            Beta hyperparameters, one per internal node (posterior pseudo-counts
            for a fitted model).

        edges : Tensor, optional
            Observed edge counts per internal node summed over the fitted window.

        window : int, 0
            Number of graphs the hyperparameters were updated on.
        """
        super(GhrgModel, self).__init__()
        self.tree = tree
        k = tree.num_internal
        alpha = torch.as_tensor(alpha, **tkwargs).reshape(-1)
        beta = torch.as_tensor(beta, **tkwargs).reshape(-1)
        if alpha.shape[0] != k or beta.shape[0] != k:
            raise ModelError(
                f"need one (alpha, beta) pair per internal node ({k}), got "
                f"{alpha.shape[0]} and {beta.shape[0]}"
            )
        if torch.any(alpha <= 0) or torch.any(beta <= 0):
            raise ModelError("Beta hyperparameters must be positive")
        if edges is None:
            edges = torch.zeros(k, dtype=torch.int64)

        self.register_buffer("alpha", alpha)
        self.register_buffer("beta", beta)
        self.register_buffer("edges", torch.as_tensor(edges, dtype=torch.int64))
        self.register_buffer(
            "pairs", torch.as_tensor(tree.possible_pairs, dtype=torch.int64)
        )
        self.window = window

    @classmethod
    def from_prior(cls, tree: Dendrogram, prior: BetaParams) -> "GhrgModel":
        ones = torch.ones(tree.num_internal, **tkwargs)
        return cls(tree, prior.alpha * ones, prior.beta * ones)

    @classmethod
    def from_window(
        cls, tree: Dendrogram, window: GraphWindow, prior: BetaParams
    ) -> "GhrgModel":
        edges = window_counts(tree, window)
        params = update_params(prior, edges, tree.possible_pairs)
        return cls(tree, params.alpha, params.beta, edges.sum(dim=0), window.w)

    @property
    def params(self) -> NodeParams:
        return NodeParams(self.alpha, self.beta)

    @property
    def probs(self) -> Tensor:
        """posterior mean connection probability per internal node"""
        return posterior_mean(self.params)

    def forward(self, edges: Tensor) -> Tensor:
        per_node = beta_binomial_log_marginal(edges, self.pairs, self.alpha, self.beta)
        return per_node.sum(dim=-1)

    def node_probs(self, rng: np.random.Generator) -> np.ndarray:
        """edge probabilities used for one sampled window, per internal node"""
        if self.mode == POSTERIOR_DRAW:
            return rng.beta(self.alpha.numpy(), self.beta.numpy())
        return self.probs.numpy()

    def sample_counts(self, w: int, rng: np.random.Generator) -> np.ndarray:
        """
        Per-node edge counts of `w` graphs drawn from the model, shape (w, K).
        Pairs under one node share a probability, so each count is binomial.
        """
        p = self.node_probs(rng)
        return rng.binomial(self.pairs.numpy(), p, size=(w, self.tree.num_internal))


def sample_graph(model: GhrgModel, rng: np.random.Generator, time: int = 0) -> GraphSnapshot:
    """Draw one graph: every vertex pair links independently with its node's probability."""
    tree = model.tree
    p = model.node_probs(rng)
    if tree.n < 2:
        return GraphSnapshot(time, tree.n)
    pair_p = p[tree.pair_lca]
    keep = rng.random(pair_p.shape[0]) < pair_p
    rows, cols = np.triu_indices(tree.n, 1)
    return GraphSnapshot(
        time, tree.n, frozenset(zip(rows[keep].tolist(), cols[keep].tolist()))
    )


def model_to_document(model: GhrgModel, labels: Sequence[str] = None) -> dict:
    """
    Serialize a model to a nested tree document. Internal nodes carry their
    child list, edge count, pair count and hyperparameters; leaves carry the
    vertex label. Children are ordered by their smallest leaf label.
    """
    tree = model.tree
    labels = list(labels) if labels is not None else [str(i) for i in range(tree.n)]
    if len(labels) != tree.n:
        raise ModelError(f"got {len(labels)} labels for {tree.n} leaves")

    def build(node_id):
        if node_id < tree.n:
            return {"label": labels[node_id]}, labels[node_id]
        k = node_id - tree.n
        kids = sorted((build(c) for c in tree.children[k]), key=lambda x: x[1])
        doc = {
            "alpha": float(model.alpha[k]),
            "beta": float(model.beta[k]),
            "children": [d for d, _ in kids],
            "edges": int(model.edges[k]),
            "pairs": int(model.pairs[k]),
        }
        return doc, kids[0][1]

    root = build(tree.n)[0] if tree.num_internal else None
    return {"labels": labels, "n": tree.n, "tree": root, "window": model.window}


def model_from_document(doc: dict) -> Tuple[GhrgModel, List[str]]:
    """inverse of `model_to_document`; returns the model and the vertex labels"""
    labels = list(doc["labels"])
    ids = {label: i for i, label in enumerate(labels)}
    clades: List[int] = []
    values: Dict[int, Tuple[float, float, int, int]] = {}

    def walk(node) -> int:
        if "label" in node:
            if node["label"] not in ids:
                raise ModelError(f"unknown leaf label {node['label']!r}")
            return 1 << ids[node["label"]]
        if len(node["children"]) < 2:
            raise ModelError("internal nodes need at least two children")
        mask = 0
        for child in node["children"]:
            mask |= walk(child)
        clades.append(mask)
        values[mask] = (node["alpha"], node["beta"], node["edges"], node["pairs"])
        return mask

    if doc.get("tree") is not None:
        walk(doc["tree"])
    tree = Dendrogram(int(doc["n"]), clades)
    alpha = [values[c][0] for c in tree.clades]
    beta = [values[c][1] for c in tree.clades]
    edges = torch.tensor([values[c][2] for c in tree.clades], dtype=torch.int64)
    model = GhrgModel(tree, alpha, beta, edges, int(doc.get("window", 0)))
    stored = torch.tensor([values[c][3] for c in tree.clades], dtype=torch.int64)
    if not torch.equal(model.pairs, stored):
        raise ModelError("pair counts in the document do not match the tree")
    return model, labels

import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from . import rng as rng_streams
from .graphs import GraphSnapshot, NetChangeError, NetworkSequence

logger = logging.getLogger(__name__)

KINDS = ("merge", "split", "form", "fragment")

# endpoint the structural index is pinned to, per kind: (before, after)
FIXED_ENDPOINTS = {
    "merge": (None, 0.5),
    "split": (0.5, None),
    "form": (1.0, None),
    "fragment": (None, 1.0),
}

# default free endpoint, a large change
DEFAULT_ENDPOINTS = {
    "merge": (0.05, 0.5),
    "split": (0.5, 0.05),
    "form": (1.0, 0.5),
    "fragment": (0.5, 1.0),
}

SEQUENCE_FILE = "seq.tsv"
TRUTH_FILE = "truth.json"
EVENTS_FILE = "events.csv"


class InfeasibleError(NetChangeError):
    pass


@dataclass(frozen=True)
class BlockProbs:
    """Two-group block model: within-group probabilities and the between-group one."""

    p_in_A: float
    p_in_B: float
    p_out: float

    def __post_init__(self):
        for name in ("p_in_A", "p_in_B", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise InfeasibleError(f"{name}={p:.6g} is not a probability")

    @property
    def mu(self) -> float:
        """structural index of group B relative to the cross-group link"""
        total = self.p_in_B + self.p_out
        return self.p_out / total if total > 0 else 0.0

    def pair_probs(self, group_sizes: Tuple[int, int]) -> np.ndarray:
        """edge probability of every vertex pair in `np.triu_indices(n, 1)` order"""
        n = sum(group_sizes)
        groups = np.repeat([0, 1], group_sizes)
        rows, cols = np.triu_indices(n, 1)
        table = np.array([[self.p_in_A, self.p_out], [self.p_out, self.p_in_B]])
        return table[groups[rows], groups[cols]]


def _pair_counts(group_sizes: Tuple[int, int]) -> Tuple[int, int, int]:
    a, b = group_sizes
    return math.comb(a, 2), math.comb(b, 2), a * b


def _check_inputs(mu: float, density: float):
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    if not 0.0 < density < 1.0:
        raise ValueError(f"density must lie in (0, 1), got {density}")


def solve_merge_split(mu: float, density: float, group_sizes: Tuple[int, int]) -> BlockProbs:
    """
    Both groups share p_in = (1 - mu) s and p_out = mu s, with s chosen so the
    expected edge density of the whole graph equals `density`.
    """
    _check_inputs(mu, density)
    w_a, w_b, between = _pair_counts(group_sizes)
    within = w_a + w_b
    s = density * (within + between) / (within * (1.0 - mu) + between * mu)
    return BlockProbs((1.0 - mu) * s, (1.0 - mu) * s, mu * s)


def solve_form_fragment(
    mu: float,
    density: float,
    group_sizes: Tuple[int, int],
    p_fix: Optional[float] = None,
) -> BlockProbs:
    """
    Group A keeps p_in_A = p_fix; group B has p_in_B = (1 - mu) s and the
    cross-group probability is p_out = mu s, with s solving the density
    constraint over all pairs. `p_fix` defaults to `density`, which makes the
    mu = 0.5 state a uniform graph.
    """
    _check_inputs(mu, density)
    if p_fix is None:
        p_fix = density
    if not 0.0 <= p_fix <= 1.0:
        raise ValueError(f"p_fix must lie in [0, 1], got {p_fix}")
    w_a, w_b, between = _pair_counts(group_sizes)
    total = w_a + w_b + between
    denom = w_b * (1.0 - mu) + between * mu
    if denom <= 0:
        raise InfeasibleError("group B has no pairs to carry the remaining density")
    s = (density * total - w_a * p_fix) / denom
    if s < 0:
        raise InfeasibleError(
            f"p_fix={p_fix} alone exceeds the target density {density}"
        )
    return BlockProbs(p_fix, (1.0 - mu) * s, mu * s)


@dataclass(frozen=True)
class ChangeSpec:
    """
    One synthetic change: snapshots before `t_c` come from the block model at
    structural index `mu_before`, the rest from `mu_after`.
    """

    kind: str = "split"
    mu_before: float = 0.5
    mu_after: float = 0.05
    t_c: int = 8
    length: int = 12
    n: int = 30
    density: float = 0.2
    group_sizes: Tuple[int, int] = (15, 15)
    seed: int = 0
    p_fix: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 < self.t_c < self.length:
            raise ValueError(
                f"change time must satisfy 0 < t_c < length, got {self.t_c} and "
                f"{self.length}"
            )
        if len(self.group_sizes) != 2 or sum(self.group_sizes) != self.n:
            raise ValueError(f"group sizes {self.group_sizes} must be two and sum to {self.n}")
        for label, fixed, value in zip(
            ("mu_before", "mu_after"), FIXED_ENDPOINTS[self.kind], (self.mu_before, self.mu_after)
        ):
            if fixed is not None and not math.isclose(value, fixed):
                raise ValueError(f"{self.kind} needs {label}={fixed}, got {value}")
        _check_inputs(self.mu_before, self.density)
        _check_inputs(self.mu_after, self.density)

    @classmethod
    def for_delta(cls, kind: str, delta_mu: float, **kwargs) -> "ChangeSpec":
        """the change of size `delta_mu` away from the kind's pinned endpoint"""
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
        free = (0.5 if kind in ("merge", "split") else 1.0) - delta_mu
        before, after = FIXED_ENDPOINTS[kind]
        before = free if before is None else before
        after = free if after is None else after
        return cls(kind=kind, mu_before=before, mu_after=after, **kwargs)

    @property
    def delta_mu(self) -> float:
        return abs(self.mu_after - self.mu_before)

    def _solve(self, mu: float) -> BlockProbs:
        if self.kind in ("merge", "split"):
            return solve_merge_split(mu, self.density, self.group_sizes)
        return solve_form_fragment(mu, self.density, self.group_sizes, self.p_fix)

    def states(self) -> Tuple[BlockProbs, BlockProbs]:
        return self._solve(self.mu_before), self._solve(self.mu_after)

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["group_sizes"] = list(self.group_sizes)
        return doc


def sample_block_graph(
    probs: BlockProbs, group_sizes: Tuple[int, int], rng: np.random.Generator, time: int = 0
) -> GraphSnapshot:
    n = sum(group_sizes)
    pair_p = probs.pair_probs(group_sizes)
    keep = rng.random(pair_p.shape[0]) < pair_p
    rows, cols = np.triu_indices(n, 1)
    return GraphSnapshot(time, n, frozenset(zip(rows[keep].tolist(), cols[keep].tolist())))


def generate_sequence(
    spec: ChangeSpec, rng: Optional[np.random.Generator] = None
) -> Tuple[NetworkSequence, int]:
    """
    Draw a sequence of `spec.length` snapshots at times 0..length-1 with
    independent edges; snapshots at t >= t_c come from the after-state. Without
    `rng` the stream is derived from `spec.seed`.
    """
    if rng is None:
        rng = rng_streams.derive_rng(spec.seed, rng_streams.SYNTH)
    before, after = spec.states()
    logger.debug("block states before %s after %s", before, after)
    snapshots = [
        sample_block_graph(before if t < spec.t_c else after, spec.group_sizes, rng, t)
        for t in range(spec.length)
    ]
    labels = tuple(str(i) for i in range(spec.n))
    return NetworkSequence(tuple(snapshots), labels), spec.t_c


def write_synthetic(spec: ChangeSpec, out_dir) -> NetworkSequence:
    """write the edge list, ground-truth document and event table into `out_dir`"""
    seq, t_c = generate_sequence(spec)
    os.makedirs(out_dir, exist_ok=True)
    seq.write_edge_list(os.path.join(out_dir, SEQUENCE_FILE))
    with open(os.path.join(out_dir, TRUTH_FILE), "w", encoding="utf-8") as f:
        json.dump(spec.to_document(), f, indent=2, sort_keys=True)
        f.write("\n")
    pd.DataFrame({"t": [t_c], "label": [spec.kind]}).to_csv(
        os.path.join(out_dir, EVENTS_FILE), index=False
    )
    logger.info("wrote %s sequence of length %d to %s", spec.kind, spec.length, out_dir)
    return seq

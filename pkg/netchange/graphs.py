import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

VERTEX_DIRECTIVE = "#@vertex"
TIME_DIRECTIVE = "#@time"
GAP_POLICIES = ("empty", "skip")

Edge = Tuple[int, int]


class NetChangeError(Exception):
    pass


class GraphError(NetChangeError):
    pass


class ParseError(NetChangeError):
    def __init__(self, message: str, line_number: int = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super(ParseError, self).__init__(message)
        self.line_number = line_number


def _normalize_edges(edges: Iterable[Sequence[int]]) -> FrozenSet[Edge]:
    return frozenset((min(u, v), max(u, v)) for u, v in edges)


@dataclass(frozen=True)
class GraphSnapshot:
    """
    One undirected simple graph at an integer time step. Vertex ids are dense
    integers 0..n-1 shared by every snapshot of a sequence; edges are stored
    as (u, v) pairs with u < v.
    """

    time: int
    n: int
    edges: FrozenSet[Edge] = frozenset()

    def __post_init__(self):
        if self.n < 0:
            raise GraphError(f"vertex count must be non-negative, got {self.n}")
        edges = _normalize_edges(self.edges)
        for u, v in edges:
            if u == v:
                raise GraphError(f"self-loop on vertex {u} at time {self.time}")
            if u < 0 or v >= self.n:
                raise GraphError(
                    f"edge ({u}, {v}) outside vertex range 0..{self.n - 1} at time "
                    f"{self.time}"
                )
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_adjacency(cls, time: int, adjacency: np.ndarray) -> "GraphSnapshot":
        rows, cols = np.nonzero(np.triu(adjacency, k=1))
        return cls(time, adjacency.shape[0], frozenset(zip(rows.tolist(), cols.tolist())))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def edge_array(self) -> np.ndarray:
        """edges as an (m, 2) integer array in sorted order"""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array(sorted(self.edges), dtype=np.int64)

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n, self.n), dtype=np.int64)
        e = self.edge_array()
        adj[e[:, 0], e[:, 1]] = 1
        adj[e[:, 1], e[:, 0]] = 1
        return adj

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g


@dataclass(frozen=True)
class NetworkSequence:
    """
    Ordered snapshots over a common vertex set. `labels[i]` is the external
    label of vertex id i. Times are consecutive integers.
    """

    snapshots: Tuple[GraphSnapshot, ...]
    labels: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise GraphError("vertex labels must be unique")
        for prev, snap in zip(self.snapshots, self.snapshots[1:]):
            if snap.time != prev.time + 1:
                raise GraphError(
                    f"snapshot times must be consecutive, got {prev.time} then "
                    f"{snap.time}"
                )
        for snap in self.snapshots:
            if snap.n != len(self.labels):
                raise GraphError(
                    f"snapshot at time {snap.time} has {snap.n} vertices, "
                    f"expected {len(self.labels)}"
                )

    def __len__(self):
        return len(self.snapshots)

    def __iter__(self):
        return iter(self.snapshots)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def times(self) -> List[int]:
        return [s.time for s in self.snapshots]

    @property
    def start(self) -> int:
        return self.snapshots[0].time

    @property
    def end(self) -> int:
        return self.snapshots[-1].time

    def snapshot_at(self, time: int) -> GraphSnapshot:
        if not self.snapshots or not self.start <= time <= self.end:
            raise GraphError(f"no snapshot at time {time}")
        return self.snapshots[time - self.start]

    def to_edge_list(self) -> str:
        """
        Serialize to the tab separated edge-list format. Vertex and time
        directives are written first so isolated vertices and empty snapshots
        survive a round trip through `parse_edge_list`.
        """
        lines = [f"{VERTEX_DIRECTIVE}\t{label}" for label in self.labels]
        lines += [f"{TIME_DIRECTIVE}\t{t}" for t in self.times]
        for snap in self.snapshots:
            for u, v in sorted(snap.edges):
                lines.append(f"{snap.time}\t{self.labels[u]}\t{self.labels[v]}")
        return "\n".join(lines) + "\n"

    def write_edge_list(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_edge_list())


@dataclass(frozen=True)
class GraphWindow:
    """The `w` snapshots ending at time `tau`."""

    tau: int
    w: int
    snapshots: Tuple[GraphSnapshot, ...] = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(self.snapshots))
        if self.w < 2:
            raise GraphError(f"window length must be at least 2, got {self.w}")
        if len(self.snapshots) != self.w:
            raise GraphError(
                f"window holds {len(self.snapshots)} snapshots, expected {self.w}"
            )
        expected = list(range(self.tau - self.w + 1, self.tau + 1))
        if [s.time for s in self.snapshots] != expected:
            raise GraphError(f"window snapshots must cover times {expected}")
        if len({s.n for s in self.snapshots}) != 1:
            raise GraphError("all window snapshots must share one vertex set")

    @property
    def n(self) -> int:
        return self.snapshots[0].n

    @property
    def start(self) -> int:
        return self.tau - self.w + 1

    def aggregate_adjacency(self) -> np.ndarray:
        """number of snapshots in which each pair is linked"""
        return sum(s.adjacency() for s in self.snapshots)


def _build_sequence(
    edges_by_time: Dict[int, set], labels: List[str], gap_policy: str
) -> NetworkSequence:
    if gap_policy not in GAP_POLICIES:
        raise ValueError(f"gap_policy must be one of {GAP_POLICIES}, got {gap_policy}")

    observed = sorted(edges_by_time)
    if gap_policy == "empty":
        times = list(range(observed[0], observed[-1] + 1))
        new_times = times
    else:
        times = observed
        new_times = [observed[0] + i for i in range(len(observed))]
        if new_times != observed:
            logger.warning(
                "skip gap policy renumbered %d observed times to consecutive steps",
                len(observed),
            )

    n = len(labels)
    snapshots = [
        GraphSnapshot(new_t, n, frozenset(edges_by_time.get(t, ())))
        for t, new_t in zip(times, new_times)
    ]
    return NetworkSequence(tuple(snapshots), tuple(labels))


def parse_edge_list(
    stream: Union[str, Iterable[str]], gap_policy: str = "empty"
) -> NetworkSequence:
    """
    Parse a `t<TAB>u<TAB>v` edge list into a NetworkSequence.

    Labels are mapped to dense vertex ids in order of first appearance. Edges
    are symmetrized and deduplicated per time step; self-loops are dropped.
    Lines starting with `#` are comments, except the `#@vertex` and `#@time`
    directives written by `NetworkSequence.to_edge_list`.

    Parameters
    ----------
    stream : str or iterable of str
        The whole text, or an open text file / iterable of lines.

    gap_policy : str, "empty"
        "empty" fills missing time steps with empty snapshots, "skip" drops them
        and renumbers the remaining steps consecutively.

    Raises
    ------
    ParseError
        On malformed lines (with line number) or when no time step is present.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)

    ids: Dict[str, int] = {}
    labels: List[str] = []
    edges_by_time: Dict[int, set] = {}

    def vertex_id(label):
        if label not in ids:
            ids[label] = len(labels)
            labels.append(label)
        return ids[label]

    def parse_time(text, line_number):
        try:
            return int(text)
        except ValueError:
            raise ParseError(f"time {text!r} is not an integer", line_number)

    for line_number, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = line.split("\t")
            if fields[0] == VERTEX_DIRECTIVE and len(fields) == 2:
                vertex_id(fields[1])
            elif fields[0] == TIME_DIRECTIVE and len(fields) == 2:
                edges_by_time.setdefault(parse_time(fields[1], line_number), set())
            continue

        fields = line.split("\t")
        if len(fields) != 3:
            raise ParseError(
                f"expected 3 tab separated fields, found {len(fields)}", line_number
            )
        t = parse_time(fields[0], line_number)
        u, v = vertex_id(fields[1]), vertex_id(fields[2])
        bucket = edges_by_time.setdefault(t, set())
        if u != v:
            bucket.add((min(u, v), max(u, v)))

    if not edges_by_time:
        raise ParseError("edge list contains no time steps")

    return _build_sequence(edges_by_time, labels, gap_policy)


def read_edge_list(path, gap_policy: str = "empty") -> NetworkSequence:
    with open(path, encoding="utf-8") as f:
        return parse_edge_list(f, gap_policy=gap_policy)


def aggregate_events(
    events: Sequence[Tuple[float, str, str]], bin_width: float
) -> NetworkSequence:
    """
    Bin timestamped interactions (timestamp in seconds, u, v) into snapshots
    of width `bin_width` seconds, starting at the earliest timestamp. Bins
    without events become empty snapshots. Labels get ids in order of first
    appearance in time.
    """
    if not bin_width > 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    if len(events) == 0:
        raise GraphError("cannot aggregate an empty event list")

    ordered = sorted(events, key=lambda e: (float(e[0]), str(e[1]), str(e[2])))
    stamps = np.array([float(e[0]) for e in ordered])
    bins = bin_index(stamps, stamps[0], bin_width)

    ids: Dict[str, int] = {}
    labels: List[str] = []
    edges_by_time: Dict[int, set] = {int(k): set() for k in range(bins[-1] + 1)}
    for k, (_, u, v) in zip(bins.tolist(), ordered):
        for label in (str(u), str(v)):
            if label not in ids:
                ids[label] = len(labels)
                labels.append(label)
        iu, iv = ids[str(u)], ids[str(v)]
        if iu != iv:
            edges_by_time[k].add((min(iu, iv), max(iu, iv)))

    return _build_sequence(edges_by_time, labels, "empty")


def to_seconds(stamps: pd.Series) -> np.ndarray:
    """numeric timestamps pass through; anything else goes through `pd.to_datetime`"""
    if pd.api.types.is_numeric_dtype(stamps):
        return stamps.to_numpy(dtype=float)
    try:
        parsed = pd.to_datetime(stamps, utc=True)
    except (ValueError, TypeError) as e:
        raise ParseError(f"unreadable timestamps: {e}") from None
    return (parsed - pd.Timestamp(0, tz="UTC")).dt.total_seconds().to_numpy()


def bin_index(stamps, origin: float, bin_width: float) -> np.ndarray:
    """snapshot index of every timestamp for bins of `bin_width` starting at `origin`"""
    stamps = np.asarray(stamps, dtype=float)
    return np.floor((stamps - origin) / bin_width).astype(np.int64)


def read_interactions(path) -> List[Tuple[float, str, str]]:
    """read a `timestamp,u,v` CSV of interactions, timestamps in seconds or dates"""
    frame = pd.read_csv(path, dtype={"u": str, "v": str}, keep_default_na=False)
    missing = sorted({"timestamp", "u", "v"} - set(frame.columns))
    if missing:
        raise ParseError(f"{path} has no column(s) {missing}")
    stamps = to_seconds(frame["timestamp"])
    return list(zip(stamps.tolist(), frame["u"].tolist(), frame["v"].tolist()))


def window_at(seq: NetworkSequence, tau: int, w: int) -> GraphWindow:
    """the `w` snapshots of `seq` ending at time `tau`"""
    if w < 2:
        raise GraphError(f"window length must be at least 2, got {w}")
    if len(seq) == 0 or tau - w + 1 < seq.start or tau > seq.end:
        raise GraphError(
            f"window of length {w} ending at {tau} is outside the sequence"
        )
    offset = tau - w + 1 - seq.start
    return GraphWindow(tau, w, seq.snapshots[offset : offset + w])


def num_pairs(n: int) -> int:
    return math.comb(n, 2)

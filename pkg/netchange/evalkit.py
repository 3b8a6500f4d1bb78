import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import rng as rng_streams
from .baselines import STATISTICS, ScalarSeries, scalar_detect_stream
from .detect import DetectConfig, Detection, detect_stream
from .synth import ChangeSpec, generate_sequence

logger = logging.getLogger(__name__)

METHODS = ("ghrg",) + tuple(STATISTICS)

SWEEP_COLUMNS = [
    "kind",
    "delta_mu",
    "method",
    "fp_rate",
    "fn_rate",
    "median_tc_err",
    "median_td_delay",
]


@dataclass(frozen=True)
class EventList:
    """known change times, kept sorted with their labels"""

    times: Tuple[int, ...]
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        labels = tuple(self.labels) or ("",) * len(self.times)
        if len(labels) != len(self.times):
            raise ValueError("need one label per event time")
        order = np.argsort(np.asarray(self.times, dtype=np.int64), kind="stable")
        object.__setattr__(self, "times", tuple(int(self.times[i]) for i in order))
        object.__setattr__(self, "labels", tuple(labels[i] for i in order))

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class DetectionList:
    """estimated change times, sorted"""

    times: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(sorted(float(t) for t in self.times)))

    @classmethod
    def from_detections(cls, detections: Sequence[Detection]) -> "DetectionList":
        return cls(tuple(d.t_hat_c for d in detections))

    def __len__(self):
        return len(self.times)


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    precision_defined: bool = True
    recall_defined: bool = True


def _matched(targets: np.ndarray, others: np.ndarray, s: int) -> np.ndarray:
    """which targets lie within s (+0.5 for the half-step offset) of any other"""
    gaps = np.abs(targets[:, None] - others[None, :]).min(axis=1)
    return gaps <= s + 0.5


def precision_recall(det: DetectionList, ev: EventList, s: int) -> PrecisionRecall:
    """
    Delay tolerant precision (fraction of estimates within s of some event)
    and recall (fraction of events within s of some estimate). A quantity with
    an empty denominator is reported as 0 with its flag cleared.
    """
    if s < 0:
        raise ValueError(f"delay must be non-negative, got {s}")
    d = np.asarray(det.times, dtype=float)
    e = np.asarray(ev.times, dtype=float)
    if len(d) == 0 or len(e) == 0:
        return PrecisionRecall(0.0, 0.0, len(d) > 0, len(e) > 0)
    return PrecisionRecall(
        float(_matched(d, e, s).mean()), float(_matched(e, d, s).mean())
    )


def precision_recall_table(
    det: DetectionList, ev: EventList, max_delay: int, method: str = "ghrg"
) -> pd.DataFrame:
    rows = []
    for s in range(max_delay + 1):
        pr = precision_recall(det, ev, s)
        rows.append({"s": s, "precision": pr.precision, "recall": pr.recall, "method": method})
    return pd.DataFrame(rows, columns=["s", "precision", "recall", "method"])


class RunOutcome(NamedTuple):
    detections: Sequence[Detection]
    t_c: int


def _true_detection(run: RunOutcome):
    """first detection whose window covers the change"""
    for d in run.detections:
        if d.t_d >= run.t_c and d.window_start <= run.t_c:
            return d
    return None


def is_false_positive(run: RunOutcome) -> bool:
    return any(d.t_d < run.t_c for d in run.detections)


def is_false_negative(run: RunOutcome) -> bool:
    return _true_detection(run) is None


def error_rates(runs: Sequence[RunOutcome]) -> Tuple[float, float]:
    """
    (fp_rate, fn_rate) over runs. A run is a false positive when it detects
    before the change and a false negative when no window covering the change
    raised a detection.
    """
    if not runs:
        raise ValueError("need at least one run")
    runs = [RunOutcome(*r) for r in runs]
    fp = sum(is_false_positive(r) for r in runs) / len(runs)
    fn = sum(is_false_negative(r) for r in runs) / len(runs)
    return fp, fn


def _median(values: List[float]) -> float:
    return float(np.median(values)) if values else float("nan")


def summarize_runs(runs: Sequence[RunOutcome]) -> dict:
    runs = [RunOutcome(*r) for r in runs]
    fp, fn = error_rates(runs)
    hits = [(_true_detection(r), r.t_c) for r in runs]
    hits = [(d, t_c) for d, t_c in hits if d is not None]
    return {
        "fp_rate": fp,
        "fn_rate": fn,
        "median_tc_err": _median([d.t_hat_c - t_c for d, t_c in hits]),
        "median_td_delay": _median([d.t_d - t_c for d, t_c in hits]),
    }


@dataclass(frozen=True)
class SweepConfig:
    """
    Detectability sweep settings. Every (kind, delta_mu) cell generates
    `runs_per_cell` sequences from `base` and runs each method on them.
    """

    detect: DetectConfig = DetectConfig()
    base: ChangeSpec = ChangeSpec()
    methods: Tuple[str, ...] = METHODS
    seed: int = 0
    workers: int = 1
    progress: bool = False

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")


def run_method(seq, method: str, cfg: DetectConfig) -> List[Detection]:
    if method == "ghrg":
        return detect_stream(seq, cfg)
    return scalar_detect_stream(ScalarSeries.from_sequence(seq, method), cfg)


def cell_detect_config(cfg: SweepConfig, cell_index: int, run: int) -> DetectConfig:
    """detector settings of one sweep run; cells are the unit of parallelism"""
    return replace(
        cfg.detect,
        fit=replace(cfg.detect.fit, workers=1),
        seed=rng_streams.derive_seed(cfg.seed, rng_streams.SWEEP, cell_index, run, 1),
        workers=1,
        progress=False,
    )


def _run_cell(args) -> List[dict]:
    cell_index, kind, delta_mu, runs_per_cell, cfg = args
    outcomes = {m: [] for m in cfg.methods}
    for r in range(runs_per_cell):
        spec = ChangeSpec.for_delta(
            kind,
            delta_mu,
            t_c=cfg.base.t_c,
            length=cfg.base.length,
            n=cfg.base.n,
            density=cfg.base.density,
            group_sizes=cfg.base.group_sizes,
            seed=rng_streams.derive_seed(cfg.seed, rng_streams.SWEEP, cell_index, r),
            p_fix=cfg.base.p_fix,
        )
        seq, t_c = generate_sequence(spec)
        detect_cfg = cell_detect_config(cfg, cell_index, r)
        for m in cfg.methods:
            outcomes[m].append(RunOutcome(run_method(seq, m, detect_cfg), t_c))
    rows = []
    for m in cfg.methods:
        row = {"kind": kind, "delta_mu": delta_mu, "method": m}
        row.update(summarize_runs(outcomes[m]))
        rows.append(row)
    logger.info("sweep cell %s delta_mu=%.3f done", kind, delta_mu)
    return rows


def run_sweep(
    kinds: Sequence[str],
    delta_mus: Sequence[float],
    runs_per_cell: int,
    cfg: SweepConfig = SweepConfig(),
) -> pd.DataFrame:
    """
    Error rates and timing summaries per (kind, delta_mu, method). Cells run in
    parallel on `cfg.workers` processes; each cell draws its randomness from
    (seed, cell index), so the table does not depend on the worker count.
    """
    if runs_per_cell < 1:
        raise ValueError("runs_per_cell must be positive")
    cells = [
        (i, kind, float(dm), runs_per_cell, cfg)
        for i, (kind, dm) in enumerate((k, d) for k in kinds for d in delta_mus)
    ]
    if cfg.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(
                tqdm(pool.map(_run_cell, cells), total=len(cells), disable=not cfg.progress)
            )
    else:
        results = [_run_cell(c) for c in tqdm(cells, disable=not cfg.progress)]
    return pd.DataFrame([row for rows in results for row in rows], columns=SWEEP_COLUMNS)


def read_events(path) -> EventList:
    """read a `t,label` CSV of known change times"""
    frame = pd.read_csv(path, dtype={"label": str}, keep_default_na=False)
    if "t" not in frame.columns:
        raise ValueError(f"{path} has no 't' column")
    labels = frame["label"].tolist() if "label" in frame.columns else []
    return EventList(tuple(int(t) for t in frame["t"]), tuple(labels))


def read_detections(path) -> List[Detection]:
    """read the detections of a report document written by `netchange detect`"""
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    fields = ("t_d", "t_hat_c", "g_tau", "p_value", "window_start", "method")
    return [Detection(**{k: record[k] for k in fields}) for record in doc["detections"]]

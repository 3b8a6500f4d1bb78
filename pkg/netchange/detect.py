import logging
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor
from tqdm import tqdm

from . import rng as rng_streams
from .fit import FitConfig, fit_ghrg
from .ghrg import (
    BetaParams,
    Dendrogram,
    GhrgModel,
    beta_binomial_log_marginal,
    posterior_mean,
    tkwargs,
    update_params,
    window_counts,
)
from .graphs import GraphError, GraphWindow, NetworkSequence, window_at

logger = logging.getLogger(__name__)

RESTART_AFTER_CHANGE = "restart_after_change"
SLIDE = "slide"
RESET_POLICIES = (RESTART_AFTER_CHANGE, SLIDE)

# replicates scored per task
BOOTSTRAP_CHUNK = 50


@dataclass(frozen=True)
class CandidateSplit:
    """A change between snapshots t_hat - 0.5 and t_hat + 0.5."""

    t_hat: float

    def __post_init__(self):
        if (self.t_hat - 0.5) != int(self.t_hat - 0.5):
            raise ValueError(f"candidate time must be a half-integer, got {self.t_hat}")

    @classmethod
    def after(cls, t: int) -> "CandidateSplit":
        return cls(t + 0.5)

    def index(self, start: int, tau: int) -> int:
        """number of window snapshots before the split"""
        if not start < self.t_hat < tau:
            raise GraphError(
                f"split {self.t_hat} leaves an empty segment in window [{start}, {tau}]"
            )
        return int(self.t_hat + 0.5) - start


@dataclass(frozen=True)
class Detection:
    t_d: int
    t_hat_c: float
    g_tau: float
    p_value: float
    window_start: int
    method: str = "ghrg"

    def summary(self) -> str:
        return (
            f"t_d={self.t_d} t_hat={self.t_hat_c:.1f} g={self.g_tau:.6g} "
            f"p={self.p_value:.6g}"
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TraceRow:
    tau: int
    g_tau: float
    t_hat: float
    p_value: float
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        row = {"tau": self.tau, "g_tau": self.g_tau, "t_hat": self.t_hat, "p_value": self.p_value}
        row.update(self.details)
        return row


@dataclass(frozen=True)
class DetectConfig:
    """
    Settings of the online detector.

    Parameters
    ----------
    w : int, 4
        Sliding window length.

    fp_rate : float, 0.05
        Target false positive rate; a window is a detection when its bootstrap
        p-value is below it.

    n_bootstrap : int, 1000
        Parametric bootstrap replicates per window.

    fit : FitConfig
        MCMC schedule; its seed is replaced per window by one derived from
        `seed` and the window end.

    reset_policy : str, "restart_after_change"
        After a detection either restart with the first post-change snapshot
        ("restart_after_change") or keep sliding ("slide").

    posterior_draw : bool, False
        Draw node probabilities from their Beta posteriors once per bootstrap
        replicate instead of using posterior means.
    """

    w: int = 4
    fp_rate: float = 0.05
    n_bootstrap: int = 1000
    fit: FitConfig = FitConfig()
    prior: BetaParams = BetaParams()
    reset_policy: str = RESTART_AFTER_CHANGE
    seed: int = 0
    workers: int = 1
    posterior_draw: bool = False
    progress: bool = False

    def __post_init__(self):
        if self.w < 2:
            raise ValueError(f"window length must be at least 2, got {self.w}")
        if not 0.0 < self.fp_rate < 1.0:
            raise ValueError(f"fp_rate must lie in (0, 1), got {self.fp_rate}")
        if self.n_bootstrap < 100:
            raise ValueError(f"n_bootstrap must be at least 100, got {self.n_bootstrap}")
        if self.reset_policy not in RESET_POLICIES:
            raise ValueError(f"reset_policy must be one of {RESET_POLICIES}")
        if self.workers < 1:
            raise ValueError("workers must be positive")


def split_statistics(edges: Tensor, pairs, prior: BetaParams) -> Tensor:
    """
    Log posterior Bayes factor of every interior split of a window.

    Parameters
    ----------
    edges : Tensor
        Per-snapshot node edge counts, shape (..., w, K).

    pairs : Tensor
        Possible pairs per node, shape (K,).

    Returns
    -------
    Tensor of shape (..., w - 1); entry k - 1 compares a change after the first
    k snapshots against no change. Every graph is scored with the posterior
    hyperparameters of the segment it belongs to.
    """
    edges = torch.as_tensor(edges, **tkwargs)
    pairs = torch.as_tensor(pairs, **tkwargs)
    w = edges.shape[-2]

    def segment_log_evidence(segment):
        params = update_params(prior, segment, pairs)
        per_graph = beta_binomial_log_marginal(
            segment, pairs, params.alpha.unsqueeze(-2), params.beta.unsqueeze(-2)
        )
        return per_graph.sum(dim=(-1, -2))

    no_change = segment_log_evidence(edges)
    stats = [
        segment_log_evidence(edges[..., :k, :])
        + segment_log_evidence(edges[..., k:, :])
        - no_change
        for k in range(1, w)
    ]
    return torch.stack(stats, dim=-1)


def lambda_stat(
    window: GraphWindow, model_tree: Dendrogram, split: CandidateSplit, prior: BetaParams
) -> float:
    """Λ at one candidate split, with every term conditioned on `model_tree`."""
    k = split.index(window.start, window.tau)
    edges = window_counts(model_tree, window)
    return float(split_statistics(edges, model_tree.possible_pairs, prior)[k - 1])


def _argmax(stats: Tensor) -> Tuple[float, int]:
    values = stats.numpy()
    k = int(np.argmax(values))  # first maximum wins ties
    return float(values[k]), k + 1


def max_lambda(
    window: GraphWindow, model_tree: Dendrogram, prior: BetaParams
) -> Tuple[float, float]:
    """(g_tau, t_hat_c): the largest Λ over the w - 1 candidates, earliest on ties"""
    edges = window_counts(model_tree, window)
    g, k = _argmax(split_statistics(edges, model_tree.possible_pairs, prior))
    return g, window.start + k - 0.5


def p_value(g: float, null: Sequence[float]) -> float:
    """fraction of null statistics strictly above g"""
    if len(null) == 0:
        raise ValueError("null distribution is empty")
    null = np.asarray(null, dtype=float)
    return float(np.count_nonzero(null > g)) / null.shape[0]


class ChangeModel(ABC):
    """
    A parametric family plugged into the windowed posterior Bayes factor
    detector. Implementations fit the no-change model on a window, turn a
    window into the sufficient statistics `statistics` consumes, and sample
    replicate windows from the fitted no-change model.
    """

    name = "model"

    @abstractmethod
    def span(self, data) -> Tuple[int, int]:
        """first and last time index of the data"""

    @abstractmethod
    def window(self, data, tau: int, w: int):
        """the w observations ending at tau"""

    @abstractmethod
    def fit(self, window, tau: int):
        """fitted no-change model of a window"""

    @abstractmethod
    def observe(self, fitted, window) -> Tensor:
        """sufficient statistics of an observed window, shape (w, ...)"""

    @abstractmethod
    def sample(self, fitted, w: int, rng: np.random.Generator) -> Tensor:
        """sufficient statistics of one replicate window from the fitted model"""

    @abstractmethod
    def statistics(self, fitted, values: Tensor) -> Tensor:
        """Λ for every interior split, shape (..., w - 1)"""

    def describe(self, fitted) -> Dict[str, Any]:
        """extra per-window trace columns"""
        return {}


class GhrgChangeModel(ChangeModel):
    name = "ghrg"

    def __init__(self, cfg: DetectConfig):
        self.cfg = cfg

    def span(self, data: NetworkSequence):
        return data.start, data.end

    def window(self, data: NetworkSequence, tau: int, w: int) -> GraphWindow:
        return window_at(data, tau, w)

    def fit(self, window: GraphWindow, tau: int) -> GhrgModel:
        fit_cfg = replace(
            self.cfg.fit, seed=rng_streams.derive_seed(self.cfg.seed, rng_streams.FIT, tau)
        )
        model = fit_ghrg(window, self.cfg.prior, fit_cfg)
        if self.cfg.posterior_draw:
            model.posterior_draw()
        return model

    def observe(self, fitted: GhrgModel, window: GraphWindow) -> Tensor:
        return window_counts(fitted.tree, window).to(**tkwargs)

    def sample(self, fitted: GhrgModel, w: int, rng: np.random.Generator) -> Tensor:
        return torch.as_tensor(fitted.sample_counts(w, rng), **tkwargs)

    def statistics(self, fitted: GhrgModel, values: Tensor) -> Tensor:
        return split_statistics(values, fitted.pairs, self.cfg.prior)

    def describe(self, fitted: GhrgModel) -> Dict[str, Any]:
        return {"n_internal": fitted.tree.num_internal, "depth": fitted.tree.depth}


def _replicate_chunk(change_model, fitted, w, seed, tau, indices):
    values = torch.stack(
        [
            change_model.sample(
                fitted, w, rng_streams.derive_rng(seed, rng_streams.BOOTSTRAP, tau, i)
            )
            for i in indices
        ]
    )
    return change_model.statistics(fitted, values).max(dim=-1).values.tolist()


def bootstrap_statistics(
    change_model: ChangeModel,
    fitted,
    w: int,
    n_bootstrap: int,
    seed: int,
    tau: int = 0,
    workers: int = 1,
) -> List[float]:
    """
    Null distribution of g_tau: the maximum Λ of `n_bootstrap` windows drawn
    from the fitted no-change model. Replicate i uses the random stream derived
    from (seed, tau, i), so the list is identical for any worker count.
    """
    if n_bootstrap < 1:
        raise ValueError(f"n_bootstrap must be positive, got {n_bootstrap}")
    chunks = [
        range(lo, min(lo + BOOTSTRAP_CHUNK, n_bootstrap))
        for lo in range(0, n_bootstrap, BOOTSTRAP_CHUNK)
    ]
    args = [(change_model, fitted, w, seed, tau, c) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _replicate_chunk(*a), args))
    else:
        results = [_replicate_chunk(*a) for a in args]
    return [g for chunk in results for g in chunk]


def bootstrap_null(
    model: GhrgModel,
    w: int,
    n_bootstrap: int,
    prior: BetaParams,
    seed: int = 0,
    tau: int = 0,
    workers: int = 1,
) -> List[float]:
    """parametric bootstrap null distribution of g_tau for a fitted GHRG"""
    change_model = GhrgChangeModel(DetectConfig(w=w, prior=prior, seed=seed))
    return bootstrap_statistics(change_model, model, w, n_bootstrap, seed, tau, workers)


class OnlineDetector:
    def __init__(self, change_model: ChangeModel, cfg: DetectConfig):
        """
        Sliding-window change-point detector shared by every model family.

        For each window end tau the no-change model is fitted on the window,
        g_tau and its change time are found over the w - 1 interior splits,
        and the p-value of g_tau is estimated against a parametric bootstrap
        of the fitted model. A p-value below `cfg.fp_rate` is a detection.

        The per-window trace of every evaluated window is kept in `trace`.
        """
        self.change_model = change_model
        self.cfg = cfg
        self.trace: List[TraceRow] = []
        self.models: Dict[int, Any] = {}

    def scan(self, window, tau: int) -> Tuple[TraceRow, Any]:
        model = self.change_model
        fitted = model.fit(window, tau)
        g, k = _argmax(model.statistics(fitted, model.observe(fitted, window)))
        null = bootstrap_statistics(
            model,
            fitted,
            self.cfg.w,
            self.cfg.n_bootstrap,
            self.cfg.seed,
            tau,
            self.cfg.workers,
        )
        start = tau - self.cfg.w + 1
        row = TraceRow(tau, g, start + k - 0.5, p_value(g, null), model.describe(fitted))
        return row, fitted

    def run(self, data) -> List[Detection]:
        cfg = self.cfg
        first, last = self.change_model.span(data)
        self.trace = []
        self.models = {}
        if last - first + 1 < cfg.w:
            logger.warning(
                "sequence of %d steps is shorter than the window (%d); nothing to do",
                last - first + 1,
                cfg.w,
            )
            return []

        detections = []
        tau = first + cfg.w - 1
        bar = tqdm(total=last - tau + 1, disable=not cfg.progress, desc=self.change_model.name)
        while tau <= last:
            tic = time.perf_counter()
            row, fitted = self.scan(self.change_model.window(data, tau, cfg.w), tau)
            self.trace.append(row)
            if cfg.progress:
                logger.info("tau=%d done in %.3fs", tau, time.perf_counter() - tic)

            step = 1
            if row.p_value < cfg.fp_rate:
                detection = Detection(
                    tau, row.t_hat, row.g_tau, row.p_value, tau - cfg.w + 1,
                    self.change_model.name,
                )
                detections.append(detection)
                self.models[tau] = fitted
                logger.info("detection: %s", detection.summary())
                if cfg.reset_policy == RESTART_AFTER_CHANGE:
                    step = int(row.t_hat + 0.5) + cfg.w - 1 - tau
            bar.update(min(step, last - tau + 1))
            tau += step
        bar.close()
        return detections


def detect_stream(
    seq: NetworkSequence, cfg: DetectConfig = DetectConfig()
) -> List[Detection]:
    return OnlineDetector(GhrgChangeModel(cfg), cfg).run(seq)


def describe_change(
    window: GraphWindow,
    model: GhrgModel,
    t_hat: float,
    prior: BetaParams = BetaParams(),
    labels: Optional[Sequence[str]] = None,
) -> List[Dict[str, Any]]:
    """
    Per internal node of the fitted tree: its leaves, possible pairs, and the
    posterior mean connection probability before the split, after it, and over
    the whole window.
    """
    tree = model.tree
    k = CandidateSplit(t_hat).index(window.start, window.tau)
    edges = window_counts(tree, window).to(**tkwargs)
    before = update_params(prior, edges[:k], tree.possible_pairs)
    after = update_params(prior, edges[k:], tree.possible_pairs)
    p_before, p_after = posterior_mean(before), posterior_mean(after)
    labels = list(labels) if labels is not None else [str(i) for i in range(tree.n)]
    rows = []
    for r in range(tree.num_internal):
        rows.append(
            {
                "node": r,
                "leaves": [labels[v] for v in tree.leaves(r)],
                "pairs": int(tree.possible_pairs[r]),
                "p_before": float(p_before[r]),
                "p_after": float(p_after[r]),
                "p_window": float(model.probs[r]),
            }
        )
    return rows


def detections_document(
    detections: Sequence[Detection], cfg: DetectConfig, method: str
) -> Dict[str, Any]:
    """report document of a detection run; the worker count is not recorded"""
    return {
        "detections": [d.to_dict() for d in detections],
        "fp_rate": cfg.fp_rate,
        "method": method,
        "n_bootstrap": cfg.n_bootstrap,
        "reset_policy": cfg.reset_policy,
        "seed": cfg.seed,
        "window": cfg.w,
    }

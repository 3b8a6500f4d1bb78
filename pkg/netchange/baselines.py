import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
import pandas as pd
import torch
from torch import Tensor
from torch.distributions import StudentT

from .detect import ChangeModel, DetectConfig, Detection, OnlineDetector
from .ghrg import tkwargs
from .graphs import GraphError, GraphSnapshot, NetworkSequence
from .modes import POSTERIOR_DRAW, SamplingModeModule

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-8


def _check_vertices(g: GraphSnapshot):
    if g.n < 1:
        raise GraphError("graph statistics need at least one vertex")


def mean_degree(g: GraphSnapshot) -> float:
    _check_vertices(g)
    return 2.0 * g.num_edges / g.n


def mean_geodesic(g: GraphSnapshot) -> float:
    """mean shortest path length over connected vertex pairs, 0.0 when there are none"""
    _check_vertices(g)
    total, count = 0, 0
    for _, lengths in nx.all_pairs_shortest_path_length(g.to_networkx()):
        for d in lengths.values():
            if d > 0:
                total += d
                count += 1
    return total / count if count else 0.0


def mean_clustering(g: GraphSnapshot) -> float:
    """average local clustering; vertices of degree below 2 count as 0"""
    _check_vertices(g)
    return float(nx.average_clustering(g.to_networkx()))


# method name -> (statistic name, statistic)
STATISTICS: Dict[str, Tuple[str, Callable[[GraphSnapshot], float]]] = {
    "degree": ("mean_degree", mean_degree),
    "geodesic": ("mean_geodesic", mean_geodesic),
    "clustering": ("mean_clustering", mean_clustering),
}


@dataclass(frozen=True)
class ScalarSeries:
    """One scalar summary per snapshot, starting at time `start`."""

    values: Tuple[float, ...]
    statistic: str
    start: int = 0

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        names = [name for name, _ in STATISTICS.values()]
        if self.statistic not in names:
            raise ValueError(f"statistic must be one of {names}, got {self.statistic!r}")

    @classmethod
    def from_sequence(cls, seq: NetworkSequence, method: str) -> "ScalarSeries":
        if method not in STATISTICS:
            raise ValueError(f"method must be one of {sorted(STATISTICS)}, got {method!r}")
        name, fn = STATISTICS[method]
        start = seq.start if len(seq) else 0
        return cls(tuple(fn(g) for g in seq), name, start)

    def __len__(self):
        return len(self.values)

    @property
    def method(self) -> str:
        return self.statistic[len("mean_"):]

    @property
    def times(self) -> List[int]:
        return list(range(self.start, self.start + len(self.values)))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, "value": list(self.values)})


@dataclass(frozen=True)
class GaussianPosterior:
    """
    Normal-Inverse-Gamma hyperparameters: sigma^2 ~ InvGamma(a0, b0) and
    mu | sigma^2 ~ Normal(mu0, sigma^2 / kappa0).
    """

    mu0: Union[float, Tensor] = 0.0
    kappa0: float = 1.0
    a0: float = 1.0
    b0: Union[float, Tensor] = 1.0

    def __post_init__(self):
        positive_b0 = bool(torch.all(torch.as_tensor(self.b0) > 0))
        if not (self.kappa0 > 0 and self.a0 > 0 and positive_b0):
            raise ValueError(
                f"kappa0, a0 and b0 must be positive, got ({self.kappa0}, {self.a0}, "
                f"{self.b0})"
            )

    @classmethod
    def from_values(cls, values) -> "GaussianPosterior":
        """empirical prior of a window: its mean and (floored) variance"""
        values = np.asarray(values, dtype=float)
        return cls(float(values.mean()), 1.0, 1.0, max(float(values.var()), VARIANCE_FLOOR))

    @classmethod
    def from_rows(cls, values: Tensor) -> "GaussianPosterior":
        """empirical prior of every row of a (..., w) batch, as tensors of shape (...)"""
        values = torch.as_tensor(values, **tkwargs)
        variance = values.var(dim=-1, correction=0).clamp(min=VARIANCE_FLOOR)
        return cls(values.mean(dim=-1), 1.0, 1.0, variance)


def nig_update(prior: GaussianPosterior, xs: Tensor) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """conjugate update on the last dimension of `xs`; returns (mu, kappa, a, b)"""
    m = xs.shape[-1]
    mean = xs.mean(dim=-1)
    ss = ((xs - mean.unsqueeze(-1)) ** 2).sum(dim=-1)
    kappa = torch.full_like(mean, prior.kappa0 + m)
    mu = (prior.kappa0 * prior.mu0 + m * mean) / kappa
    a = torch.full_like(mean, prior.a0 + 0.5 * m)
    b = prior.b0 + 0.5 * ss + prior.kappa0 * m * (mean - prior.mu0) ** 2 / (2.0 * kappa)
    return mu, kappa, a, b


def predictive(mu, kappa, a, b) -> StudentT:
    """posterior predictive of one new observation"""
    return StudentT(2.0 * a, mu, torch.sqrt(b * (kappa + 1.0) / (a * kappa)))


def _segment_log_evidence(prior: GaussianPosterior, xs: Tensor) -> Tensor:
    params = [p.unsqueeze(-1) for p in nig_update(prior, xs)]
    return predictive(*params).log_prob(xs).sum(dim=-1)


def gaussian_log_marginal(xs: Sequence[float], prior: GaussianPosterior) -> float:
    """
    Posterior-marginal log-likelihood of `xs`: the hyperparameters are updated
    on all of `xs`, then every observation is scored under the resulting
    Student-t posterior predictive.
    """
    xs = torch.as_tensor(np.asarray(xs, dtype=float), **tkwargs)
    if xs.numel() == 0:
        raise ValueError("cannot score an empty series")
    return float(_segment_log_evidence(prior, xs.reshape(-1)))


def gaussian_split_statistics(
    values: Tensor, prior: Optional[GaussianPosterior] = None
) -> Tensor:
    """
    Λ of every interior split of (..., w) windows under the Gaussian model.
    Without `prior` every row is scored under its own empirical prior.
    """
    values = torch.as_tensor(values, **tkwargs)
    if prior is None:
        prior = GaussianPosterior.from_rows(values)
    no_change = _segment_log_evidence(prior, values)
    stats = [
        _segment_log_evidence(prior, values[..., :k])
        + _segment_log_evidence(prior, values[..., k:])
        - no_change
        for k in range(1, values.shape[-1])
    ]
    return torch.stack(stats, dim=-1)


class GaussianModel(SamplingModeModule):
    def __init__(self, prior: GaussianPosterior, values):
        """
        Univariate Gaussian no-change model of a window with a conjugate
        Normal-Inverse-Gamma posterior.

        Sampling draws replicate windows from the posterior predictive: in
        PLUG_IN mode every value is an independent Student-t draw, in
        POSTERIOR_DRAW mode (mu, sigma^2) is drawn once per window and values
        are Normal given them.
        """
        super(GaussianModel, self).__init__()
        self.prior = prior
        values = torch.as_tensor(np.asarray(values, dtype=float), **tkwargs)
        mu, kappa, a, b = nig_update(prior, values)
        self.register_buffer("mu", mu)
        self.register_buffer("kappa", kappa)
        self.register_buffer("a", a)
        self.register_buffer("b", b)

    @classmethod
    def from_window(cls, values) -> "GaussianModel":
        return cls(GaussianPosterior.from_values(values), values)

    def forward(self, values: Tensor) -> Tensor:
        return predictive(self.mu, self.kappa, self.a, self.b).log_prob(values)

    def sample(self, w: int, rng: np.random.Generator) -> np.ndarray:
        mu, kappa, a, b = (float(v) for v in (self.mu, self.kappa, self.a, self.b))
        if self.mode == POSTERIOR_DRAW:
            sigma2 = b / rng.gamma(a)
            mean = rng.normal(mu, np.sqrt(sigma2 / kappa))
            return rng.normal(mean, np.sqrt(sigma2), size=w)
        scale = np.sqrt(b * (kappa + 1.0) / (a * kappa))
        return mu + scale * rng.standard_t(2.0 * a, size=w)


class GaussianChangeModel(ChangeModel):
    def __init__(self, cfg: DetectConfig, name: str = "gaussian"):
        self.cfg = cfg
        self.name = name

    def span(self, data: ScalarSeries):
        return data.start, data.start + len(data) - 1

    def window(self, data: ScalarSeries, tau: int, w: int) -> Tensor:
        offset = tau - w + 1 - data.start
        return torch.as_tensor(data.values[offset : offset + w], **tkwargs)

    def fit(self, window: Tensor, tau: int) -> GaussianModel:
        model = GaussianModel.from_window(window.numpy())
        if self.cfg.posterior_draw:
            model.posterior_draw()
        logger.debug(
            "gaussian fit at %d: mu=%.4g b=%.4g", tau, float(model.mu), float(model.b)
        )
        return model

    def observe(self, fitted: GaussianModel, window: Tensor) -> Tensor:
        return window

    def sample(self, fitted: GaussianModel, w: int, rng: np.random.Generator) -> Tensor:
        return torch.as_tensor(fitted.sample(w, rng), **tkwargs)

    def statistics(self, fitted: GaussianModel, values: Tensor) -> Tensor:
        return gaussian_split_statistics(values)


def scalar_detect_stream(
    series: ScalarSeries, cfg: DetectConfig = DetectConfig()
) -> List[Detection]:
    """the windowed detector of `detect.detect_stream` with a Gaussian model"""
    return OnlineDetector(GaussianChangeModel(cfg, series.method), cfg).run(series)

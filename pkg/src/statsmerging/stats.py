"""Weight-distribution statistics: mean, variance, magnitude and top singular values."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import ModelCheckpoint
from .errors import ParameterError
from .numerics import as_matrix, frobenius_norm, svd_values


@dataclass(frozen=True)
class StatsConfig:
    rank: int = 3
    normalize: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError("rank must be at least 1")

    @property
    def width(self) -> int:
        return 3 + self.rank


@dataclass(frozen=True)
class WeightStats:
    mu: float
    var: float
    norm: float
    singular: tuple[float, ...]

    def as_vector(self) -> np.ndarray:
        return np.array([self.mu, self.var, self.norm, *self.singular])


def layer_stats(layer_weight: np.ndarray, cfg: StatsConfig = StatsConfig()) -> WeightStats:
    """Statistics of a single tensor.

    When ``cfg.rank`` exceeds the smaller dimension (bias rows, thin layers)
    the missing singular values are zero.
    """
    w = as_matrix(layer_weight)
    if w.size == 0:
        raise ParameterError("cannot take statistics of an empty matrix")
    mu = float(w.mean())
    var = float(np.mean((w - mu) ** 2))
    available = min(cfg.rank, min(w.shape))
    sv = np.zeros(cfg.rank)
    sv[:available] = svd_values(w, available)
    return WeightStats(mu, var, frobenius_norm(w), tuple(float(s) for s in sv))


def model_layer_stats(ckpt: ModelCheckpoint, cfg: StatsConfig = StatsConfig()) -> list[WeightStats]:
    """One record per layer, computed on the weight matrix only."""
    return [layer_stats(ckpt.layer_params(l)[0], cfg) for l in range(ckpt.arch.num_layers)]


def mean_stats(records: Sequence[WeightStats]) -> WeightStats:
    if not records:
        raise ParameterError("nothing to average")
    mean = np.mean([r.as_vector() for r in records], axis=0)
    return WeightStats(float(mean[0]), float(mean[1]), float(mean[2]), tuple(float(s) for s in mean[3:]))


def task_stats(ckpt: ModelCheckpoint, cfg: StatsConfig = StatsConfig()) -> WeightStats:
    """Elementwise mean of the per-layer weight statistics; biases excluded."""
    return mean_stats(model_layer_stats(ckpt, cfg))


def stats_table(ckpts: Sequence[ModelCheckpoint], cfg: StatsConfig, mode: str) -> list[list[WeightStats]]:
    """K x L table for ``layer_wise`` mode, K x 1 for ``task_wise``."""
    if mode == "layer_wise":
        return [model_layer_stats(c, cfg) for c in ckpts]
    if mode == "task_wise":
        return [[task_stats(c, cfg)] for c in ckpts]
    raise ParameterError(f"unknown mode {mode!r}")


def feature_vector(stats_table: Sequence[Sequence[WeightStats]], cfg: StatsConfig = StatsConfig()) -> np.ndarray:
    """Flatten a K x L stats table into a ``(K, L, 3 + r)`` feature array.

    With ``cfg.normalize`` each channel is z-scored (population std) over all
    K*L entries; constant channels become 0.
    """
    if not stats_table or not stats_table[0]:
        raise ParameterError("stats table must have at least one entry")
    width = len(stats_table[0])
    if any(len(row) != width for row in stats_table):
        raise ParameterError("stats table must be rectangular")
    feats = np.array([[s.as_vector() for s in row] for row in stats_table])
    if not cfg.normalize:
        return feats
    flat = feats.reshape(-1, feats.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    # rounding noise on a constant channel must not be blown up to unit scale
    varying = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    z = np.where(varying, (flat - mean) / np.where(varying, std, 1.0), 0.0)
    return z.reshape(feats.shape)

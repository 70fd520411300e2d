"""Merging-coefficient tables and the cross-task softmax that produces them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

MODES = ("task_wise", "layer_wise")
SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CoefficientTable:
    """``values`` is a length-K vector (task-wise) or a K x L array (layer-wise).

    Every column (every layer) sums to one over the task axis.
    """

    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"unknown coefficient mode {self.mode!r}")
        vals = np.array(self.values, dtype=np.float64)
        want = 1 if self.mode == "task_wise" else 2
        if vals.ndim != want or vals.shape[0] < 1 or vals.size == 0:
            raise ShapeError(f"{self.mode} coefficients need a {want}-D array, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0) or np.any(vals > 1):
            raise ParameterError("coefficients must lie in [0, 1]")
        sums = vals.sum(axis=0)
        if np.any(np.abs(sums - 1.0) > SUM_TOL):
            raise ParameterError(f"coefficients must sum to 1 over tasks, got {sums}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __eq__(self, other):
        if not isinstance(other, CoefficientTable):
            return NotImplemented
        return self.mode == other.mode and np.array_equal(self.values, other.values)

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def per_layer(self, num_layers: int) -> np.ndarray:
        """K x L view; task-wise coefficients repeat across layers."""
        if self.mode == "task_wise":
            return np.repeat(self.values[:, None], num_layers, axis=1)
        if self.values.shape[1] != num_layers:
            raise ShapeError(f"table covers {self.values.shape[1]} layers, model has {num_layers}")
        return self.values

    @classmethod
    def uniform(cls, num_tasks: int, num_layers: int | None = None) -> CoefficientTable:
        if num_layers is None:
            return normalize(np.zeros(num_tasks))
        return normalize(np.zeros((num_tasks, num_layers)))


def softmax_tasks(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=0, keepdims=True)


def normalize(raw_scores) -> CoefficientTable:
    """Softmax over the task axis; a 2-D input is normalized independently per layer."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if raw.ndim not in (1, 2) or raw.shape[0] < 1:
        raise ShapeError(f"raw scores must be K or K x L, got shape {raw.shape}")
    return CoefficientTable("task_wise" if raw.ndim == 1 else "layer_wise", softmax_tasks(raw))

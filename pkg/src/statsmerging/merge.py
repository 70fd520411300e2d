"""Merged-checkpoint construction.

StatsMerging's coefficient-weighted combination plus three baselines: weight
averaging, task arithmetic and Ties-Merging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, check_compatible
from .coefficients import CoefficientTable
from .errors import CompatibilityError, ParameterError, ShapeError

METHODS = ("stats", "weight_avg", "task_arithmetic", "ties")


@dataclass(frozen=True)
class MergeRequest:
    method: str
    mode: str = "layer_wise"
    coefficients: CoefficientTable | None = None
    scaling: float | None = None
    keep_fraction: float = 0.2
    base: ModelCheckpoint | None = None
    delta: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown merge method {self.method!r}")
        if self.method == "stats" and self.coefficients is None:
            raise ParameterError("stats merging needs a coefficient table")
        if self.method in ("task_arithmetic", "ties"):
            if self.base is None:
                raise ParameterError(f"{self.method} needs a pretrained base")
            if self.scaling is None:
                raise ParameterError(f"{self.method} needs a scaling factor")
        if self.method == "stats" and self.delta and self.base is None:
            raise ParameterError("delta-mode stats merging needs a pretrained base")


def _check_against_base(base: ModelCheckpoint, task_ckpts: Sequence[ModelCheckpoint]) -> None:
    check_compatible([base, *task_ckpts])
    if base.meta.role != "pretrained":
        raise CompatibilityError(f"base must be a pretrained checkpoint, got role {base.meta.role!r}")


def combine(task_tensors: Sequence[Sequence[np.ndarray]], coeffs: np.ndarray) -> list[np.ndarray]:
    """Per-layer weighted sum. ``task_tensors[k]`` lists task k's tensors in
    (weight, bias) pairs; ``coeffs`` is K x L with columns summing to 1.

    Each layer is evaluated as theta_a + sum_{k != a} lambda_k (theta_k - theta_a),
    anchored at the task a with the largest coefficient. On the simplex this
    equals sum_k lambda_k theta_k, but it reproduces identical inputs and
    vertex tables exactly. The summation order is fixed.
    """
    out = []
    for i in range(len(task_tensors[0])):
        l = i // 2
        anchor = int(np.argmax(coeffs[:, l]))
        base = task_tensors[anchor][i]
        acc = base
        for k in range(len(task_tensors)):
            if k != anchor:
                acc = acc + coeffs[k, l] * (task_tensors[k][i] - base)
        out.append(np.array(acc, dtype=np.float64))
    return out


def stats_merge(
    task_ckpts: Sequence[ModelCheckpoint],
    coeffs: CoefficientTable,
    base: ModelCheckpoint | None = None,
    delta: bool = False,
) -> ModelCheckpoint:
    """theta_m = sum_k lambda_k^l theta_k^l, biases sharing their layer's coefficient.

    With ``delta=True`` the task vectors are combined on top of ``base``
    instead of the raw weights.
    """
    check_compatible(task_ckpts)
    if coeffs.num_tasks != len(task_ckpts):
        raise ShapeError(f"table has {coeffs.num_tasks} tasks, got {len(task_ckpts)} checkpoints")
    first = task_ckpts[0]
    table = coeffs.per_layer(first.arch.num_layers)
    if delta:
        if base is None:
            raise ParameterError("delta mode needs a base checkpoint")
        _check_against_base(base, task_ckpts)
        deltas = [[t - b for t, b in zip(c.tensors(), base.tensors())] for c in task_ckpts]
        merged = [b + d for b, d in zip(base.tensors(), combine(deltas, table))]
    else:
        merged = combine([c.tensors() for c in task_ckpts], table)
    return first.with_params(merged, role="merged", task_id=None)


def weight_average(task_ckpts: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    check_compatible(task_ckpts)
    return stats_merge(task_ckpts, CoefficientTable.uniform(len(task_ckpts)))


def task_arithmetic(base: ModelCheckpoint, task_ckpts: Sequence[ModelCheckpoint], scaling: float) -> ModelCheckpoint:
    """theta_pre + scaling * sum_k (theta_k - theta_pre).

    Evaluated as ``(1 - K*scaling) * theta_pre + scaling * sum_k theta_k`` so the
    scaling=0 and (K=1, scaling=1) corner cases reproduce their inputs exactly.
    """
    _check_against_base(base, task_ckpts)
    k = len(task_ckpts)
    merged = []
    for i, b in enumerate(base.tensors()):
        total = task_ckpts[0].tensors()[i]
        for c in task_ckpts[1:]:
            total = total + c.tensors()[i]
        merged.append((1.0 - k * scaling) * b + scaling * total)
    return base.with_params(merged, role="merged", task_id=None)


def trim_count(size: int, keep_fraction: float) -> int:
    return max(1, min(size, math.ceil(keep_fraction * size - 1e-9)))


def ties_vector(task_vectors: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Trim / elect sign / disjoint mean over a K x P matrix of flattened task vectors."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ParameterError("keep_fraction must lie in (0, 1]")
    tv = np.asarray(task_vectors, dtype=np.float64)
    keep = trim_count(tv.shape[1], keep_fraction)
    trimmed = np.zeros_like(tv)
    for k, row in enumerate(tv):
        top = np.argsort(-np.abs(row), kind="stable")[:keep]
        trimmed[k, top] = row[top]
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (trimmed != 0)
    counts = agree.sum(axis=0)
    sums = np.where(agree, trimmed, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)


def ties_merge(
    base: ModelCheckpoint,
    task_ckpts: Sequence[ModelCheckpoint],
    scaling: float,
    keep_fraction: float = 0.2,
) -> ModelCheckpoint:
    """Ties-Merging with global (whole-model) top-k trimming per task."""
    _check_against_base(base, task_ckpts)
    flat_base = base.flat()
    vectors = np.stack([c.flat() - flat_base for c in task_ckpts])
    merged = flat_base + scaling * ties_vector(vectors, keep_fraction)
    return base.from_flat(merged, role="merged", task_id=None)


def merge(request: MergeRequest, task_ckpts: Sequence[ModelCheckpoint]) -> ModelCheckpoint:
    if request.method == "stats":
        return stats_merge(task_ckpts, request.coefficients, request.base, request.delta)
    if request.method == "weight_avg":
        return weight_average(task_ckpts)
    if request.method == "task_arithmetic":
        return task_arithmetic(request.base, task_ckpts, request.scaling)
    return ties_merge(request.base, task_ckpts, request.scaling, request.keep_fraction)

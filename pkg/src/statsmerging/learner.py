"""StatsMergeLearner: a two-layer MLP from weight statistics to merging coefficients.

One shared MLP scores every (task, layer) statistics vector. Scores are
softmax-normalized over tasks, the merged model is the coefficient-weighted
sum of the frozen task models, and training backpropagates the loss on the
merged model's predictions through the merge into the MLP.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import fileformat
from .checkpoint import ModelCheckpoint, _backward_params, _forward_params, check_compatible, softmax
from .coefficients import CoefficientTable, normalize, softmax_tasks
from .distill import PseudoLabeledSet, batch_ce, batch_kl
from .errors import ParameterError, ShapeError
from .merge import combine
from .numerics import OptimizerState, adam_step, as_matrix, make_rng
from .stats import StatsConfig, feature_vector, stats_table

__all__ = [
    "CoefficientTable",
    "EpochRecord",
    "SMLParams",
    "SMLTrainConfig",
    "SMLTrainResult",
    "coefficient_gradient",
    "init_sml",
    "normalize",
    "predict_coefficients",
    "sml_forward",
    "train_sml",
]

log = logging.getLogger(__name__)

LABEL_MODES = ("kd_hard", "kd_soft", "ground_truth")


@dataclass(frozen=True, eq=False)
class SMLParams:
    w1: np.ndarray  # H x F
    b1: np.ndarray  # 1 x H
    w2: np.ndarray  # 1 x H
    b2: np.ndarray  # 1 x 1

    def __post_init__(self):
        w1 = as_matrix(self.w1)
        h = w1.shape[0]
        for name, want in (("b1", (1, h)), ("w2", (1, h)), ("b2", (1, 1))):
            arr = as_matrix(getattr(self, name))
            if arr.shape != want:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {want}")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "w1", w1)

    def __eq__(self, other):
        if not isinstance(other, SMLParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def input_width(self) -> int:
        return self.w1.shape[1]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vector: np.ndarray) -> SMLParams:
        parts = []
        offset = 0
        for a in self.arrays():
            parts.append(vector[offset : offset + a.size].reshape(a.shape).copy())
            offset += a.size
        return SMLParams(*parts)


def init_sml(width: int, hidden: int = 64, seed: int = 0) -> SMLParams:
    """Uniform fan-in initialization, bound 1/sqrt(fan_in); biases start at zero."""
    rng = make_rng(seed)
    w1 = rng.uniform(-1.0, 1.0, size=(hidden, width)) / np.sqrt(width)
    w2 = rng.uniform(-1.0, 1.0, size=(1, hidden)) / np.sqrt(hidden)
    return SMLParams(w1, np.zeros((1, hidden)), w2, np.zeros((1, 1)))


def sml_forward(params: SMLParams, feature) -> float:
    """w2 . relu(w1 f + b1) + b2 for a single statistics vector."""
    f = np.asarray(feature, dtype=np.float64).ravel()
    if f.size != params.input_width:
        raise ShapeError(f"feature has length {f.size}, learner expects {params.input_width}")
    hidden = np.maximum(params.w1 @ f + params.b1[0], 0.0)
    return float(params.w2[0] @ hidden + params.b2[0, 0])


def sml_scores(params: SMLParams, features: np.ndarray) -> np.ndarray:
    """Vectorized :func:`sml_forward` over the leading axes of ``features``."""
    x = features.reshape(-1, features.shape[-1])
    h = np.maximum(x @ params.w1.T + params.b1, 0.0)
    return (h @ params.w2.T + params.b2).reshape(features.shape[:-1])


def coefficient_gradient(
    task_ckpts: Sequence[ModelCheckpoint], merged_grads: Sequence[np.ndarray], layer: int
) -> np.ndarray:
    """dLoss/dlambda_k^l: inner product of the merged layer-l gradient (weight
    and bias) with task k's layer-l tensors."""
    names = list(task_ckpts[0].params)
    if len(merged_grads) != len(names):
        raise ShapeError(f"{len(merged_grads)} gradients for {len(names)} parameters")
    gw, gb = merged_grads[2 * layer], merged_grads[2 * layer + 1]
    out = np.empty(len(task_ckpts))
    for k, c in enumerate(task_ckpts):
        w, b = c.layer_params(layer)
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError(f"gradient shapes do not match layer {layer} of checkpoint {k}")
        out[k] = np.sum(gw * w) + np.sum(gb * b)
    return out


@dataclass(frozen=True)
class SMLTrainConfig:
    epochs: int = 500
    base_lr: float = 1e-3
    decay_every: int = 100
    decay_factor: float = 0.1
    batch_size: int = 32
    hidden: int = 64
    label_mode: str = "kd_hard"
    pseudo_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ParameterError("epochs, batch_size and hidden must be at least 1")
        if self.label_mode not in LABEL_MODES:
            raise ParameterError(f"unknown label mode {self.label_mode!r}")
        if not 0.0 < self.pseudo_fraction <= 1.0:
            raise ParameterError("pseudo_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    coefficients: CoefficientTable


@dataclass(frozen=True)
class SMLTrainResult:
    params: SMLParams
    coefficients: CoefficientTable
    history: list[EpochRecord] = field(default_factory=list)


class _MergeProblem:
    """Frozen task tensors plus their statistics features for one merge mode."""

    def __init__(self, task_ckpts: Sequence[ModelCheckpoint], features: np.ndarray, mode: str):
        self.arch = task_ckpts[0].arch
        self.task_tensors = [c.tensors() for c in task_ckpts]
        self.features = features
        self.mode = mode
        self.num_tasks = len(task_ckpts)
        self.num_layers = self.arch.num_layers
        if features.shape[:2] != (self.num_tasks, self.num_layers if mode == "layer_wise" else 1):
            raise ShapeError(f"feature table shape {features.shape} does not fit mode {mode}")

    def table(self, params: SMLParams) -> CoefficientTable:
        scores = sml_scores(params, self.features)
        return normalize(scores[:, 0] if self.mode == "task_wise" else scores)

    def loss_and_grad(
        self, params: SMLParams, inputs: np.ndarray, targets: np.ndarray, soft: bool
    ) -> tuple[float, np.ndarray]:
        x = self.features.reshape(-1, self.features.shape[-1])
        pre = x @ params.w1.T + params.b1
        hidden = np.maximum(pre, 0.0)
        scores = (hidden @ params.w2.T + params.b2).reshape(self.features.shape[:2])
        lam = softmax_tasks(scores)
        lam_full = np.repeat(lam, self.num_layers, axis=1) if self.mode == "task_wise" else lam

        merged = combine(self.task_tensors, lam_full)
        out, cache = _forward_params(self.arch, merged, inputs)
        probs = softmax(out)
        n = inputs.shape[0]
        if soft:
            loss = batch_kl(targets, probs)
            g_out = (probs - targets) / n
        else:
            loss = batch_ce(probs, targets)
            g_out = probs.copy()
            g_out[np.arange(n), targets] -= 1.0
            g_out /= n
        g_merged = _backward_params(self.arch, merged, cache, g_out)

        g_lam = np.empty((self.num_tasks, self.num_layers))
        for k, tensors in enumerate(self.task_tensors):
            for l in range(self.num_layers):
                g_lam[k, l] = np.sum(g_merged[2 * l] * tensors[2 * l]) + np.sum(
                    g_merged[2 * l + 1] * tensors[2 * l + 1]
                )
        if self.mode == "task_wise":
            g_lam = g_lam.sum(axis=1, keepdims=True)
        g_scores = lam * (g_lam - np.sum(lam * g_lam, axis=0, keepdims=True))

        g_s = g_scores.reshape(-1, 1)
        g_w2 = g_s.T @ hidden
        g_b2 = g_s.sum(axis=0, keepdims=True)
        g_pre = (g_s @ params.w2) * (pre > 0)
        g_w1 = g_pre.T @ x
        g_b1 = g_pre.sum(axis=0, keepdims=True)
        grad = np.concatenate([g_w1.ravel(), g_b1.ravel(), g_w2.ravel(), g_b2.ravel()])
        return loss, grad


def _features(task_ckpts, stats_cfg: StatsConfig, mode: str) -> np.ndarray:
    return feature_vector(stats_table(task_ckpts, stats_cfg, mode), stats_cfg)


def _targets(pseudo_set: PseudoLabeledSet, label_mode: str) -> tuple[np.ndarray, bool]:
    if label_mode in ("kd_hard", "kd_soft") and pseudo_set.label_source != "teacher":
        raise ParameterError(f"{label_mode} training needs teacher pseudo labels")
    if label_mode == "ground_truth" and pseudo_set.label_source != "ground_truth":
        raise ParameterError("ground_truth training needs a ground-truth labeled set")
    if label_mode == "kd_soft":
        return pseudo_set.soft_label, True
    return pseudo_set.hard_label, False


def sml_loss_and_grad(
    params: SMLParams,
    task_ckpts: Sequence[ModelCheckpoint],
    pseudo_set: PseudoLabeledSet,
    stats_cfg: StatsConfig = StatsConfig(),
    mode: str = "layer_wise",
    label_mode: str = "kd_hard",
) -> tuple[float, SMLParams]:
    """Full-set training loss and its gradient with respect to every learner parameter."""
    problem = _MergeProblem(task_ckpts, _features(task_ckpts, stats_cfg, mode), mode)
    targets, soft = _targets(pseudo_set, label_mode)
    loss, grad = problem.loss_and_grad(params, pseudo_set.inputs, targets, soft)
    return loss, params.from_flat(grad)


def predict_coefficients(
    params: SMLParams,
    task_ckpts: Sequence[ModelCheckpoint],
    stats_cfg: StatsConfig = StatsConfig(),
    mode: str = "layer_wise",
) -> CoefficientTable:
    check_compatible(task_ckpts)
    return _MergeProblem(task_ckpts, _features(task_ckpts, stats_cfg, mode), mode).table(params)


def train_sml(
    task_ckpts: Sequence[ModelCheckpoint],
    pseudo_set: PseudoLabeledSet,
    cfg: SMLTrainConfig = SMLTrainConfig(),
    stats_cfg: StatsConfig = StatsConfig(),
    mode: str = "layer_wise",
    init: SMLParams | None = None,
) -> SMLTrainResult:
    """Fit the learner so the merged model reproduces the training labels.

    Task models stay frozen; only the MLP is updated, with Adam under a
    StepLR schedule. Each history record holds the full-set loss and the
    coefficient table after that epoch.
    """
    check_compatible(task_ckpts)
    if len(pseudo_set) < 1:
        raise ParameterError("pseudo-labeled set is empty")
    if pseudo_set.num_classes != task_ckpts[0].arch.num_classes:
        raise ShapeError(
            f"pseudo set has {pseudo_set.num_classes} classes, models emit {task_ckpts[0].arch.num_classes}"
        )
    targets, soft = _targets(pseudo_set, cfg.label_mode)
    problem = _MergeProblem(task_ckpts, _features(task_ckpts, stats_cfg, mode), mode)
    params = init or init_sml(stats_cfg.width, cfg.hidden, cfg.seed)
    if params.input_width != stats_cfg.width:
        raise ShapeError(f"learner takes {params.input_width} features, stats give {stats_cfg.width}")

    rng = make_rng(cfg.seed)
    vector = params.flat()
    state = OptimizerState.zeros(
        vector.size, base_lr=cfg.base_lr, decay_every=cfg.decay_every, decay_factor=cfg.decay_factor
    )
    n = len(pseudo_set)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            _, grad = problem.loss_and_grad(params, pseudo_set.inputs[rows], targets[rows], soft)
            vector, state = adam_step(vector, grad, state, epoch)
            params = params.from_flat(vector)
        loss, _ = problem.loss_and_grad(params, pseudo_set.inputs, targets, soft)
        lr = state.learning_rate(epoch)
        history.append(EpochRecord(epoch, lr, loss, problem.table(params)))
        if epoch % 100 == 0 or epoch == cfg.epochs - 1:
            log.debug("sml epoch %d lr %.1e loss %.6f", epoch, lr, loss)
    return SMLTrainResult(params, problem.table(params), history)


def save_sml(params: SMLParams, path: str | os.PathLike, stats_cfg: StatsConfig, mode: str, info: dict | None = None):
    header = {
        "kind": "sml",
        "mode": mode,
        "rank": stats_cfg.rank,
        "normalize": stats_cfg.normalize,
        "info": info or {},
    }
    names = ("w1", "b1", "w2", "b2")
    return fileformat.write(path, header, [(n, a, "f64") for n, a in zip(names, params.arrays())])


def load_sml(path: str | os.PathLike) -> tuple[SMLParams, StatsConfig, str]:
    header, t = fileformat.read(path, kind="sml")
    params = SMLParams(t["w1"], t["b1"], t["w2"], t["b2"])
    return params, StatsConfig(int(header["rank"]), bool(header["normalize"])), header["mode"]

"""Task-specific teacher pseudo-labels, CE/KL losses, and cross-architecture distillation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import fileformat
from .checkpoint import (
    PROB_CLAMP,
    Dataset,
    ModelCheckpoint,
    _backward_params,
    _forward_params,
    _split,
    forward,
    softmax,
)
from .errors import CompatibilityError, ParameterError, ShapeError
from .numerics import OptimizerState, adam_step, as_matrix, make_rng

LABEL_SOURCES = ("teacher", "ground_truth")


@dataclass(frozen=True, eq=False)
class PseudoLabeledSet:
    """Validation inputs with per-row labels for learner training.

    ``label_source`` is ``"teacher"`` for sets built by
    :func:`generate_pseudo_labels` and ``"ground_truth"`` for the supervised
    reference built by :func:`ground_truth_set`.
    """

    inputs: np.ndarray
    source_task: np.ndarray
    hard_label: np.ndarray
    soft_label: np.ndarray
    num_classes: int
    label_source: str = "teacher"

    def __post_init__(self):
        inputs = as_matrix(self.inputs)
        n = inputs.shape[0]
        source = np.asarray(self.source_task, dtype=np.int64).ravel()
        hard = np.asarray(self.hard_label, dtype=np.int64).ravel()
        soft = as_matrix(self.soft_label)
        if self.label_source not in LABEL_SOURCES:
            raise ParameterError(f"unknown label source {self.label_source!r}")
        if n < 1:
            raise ParameterError("pseudo-labeled set is empty")
        if source.shape[0] != n or hard.shape[0] != n or soft.shape != (n, self.num_classes):
            raise ShapeError("pseudo-labeled set fields disagree on row count or class count")
        for arr in (inputs, source, hard, soft):
            arr.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "source_task", source)
        object.__setattr__(self, "hard_label", hard)
        object.__setattr__(self, "soft_label", soft)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PseudoLabeledSet):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.label_source == other.label_source
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("inputs", "source_task", "hard_label", "soft_label")
            )
        )


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.7
    temperature: float = 4.0
    epochs: int = 100
    lr: float = 1e-3
    decay_every: int = 100
    decay_factor: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ParameterError("temperature must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch_size >= 1")


def select_rows(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Seeded subsample of ``round(fraction * n)`` row indices, in ascending order."""
    if not 0.0 < fraction <= 1.0:
        raise ParameterError("fraction must lie in (0, 1]")
    count = int(round(fraction * n))
    if count < 1:
        raise ParameterError(f"fraction {fraction} of {n} rows selects nothing")
    return np.sort(rng.permutation(n)[:count])


def generate_pseudo_labels(
    task_ckpts: Sequence[ModelCheckpoint],
    val_inputs: Sequence[np.ndarray],
    fraction: float = 0.2,
    seed: int = 0,
) -> PseudoLabeledSet:
    """Label each task's validation inputs with that task's own fine-tuned model.

    Only input matrices are accepted: no ground-truth label can reach here.
    """
    if len(task_ckpts) != len(val_inputs) or not task_ckpts:
        raise ParameterError("need one validation input matrix per task checkpoint")
    num_classes = task_ckpts[0].arch.num_classes
    rng = make_rng(seed)
    xs, sources, softs = [], [], []
    for k, (teacher, x) in enumerate(zip(task_ckpts, val_inputs)):
        if teacher.arch.num_classes != num_classes:
            raise CompatibilityError("all teachers must share one class space")
        x = as_matrix(x)
        rows = select_rows(x.shape[0], fraction, rng)
        xs.append(x[rows])
        sources.append(np.full(rows.size, k))
        softs.append(forward(teacher, x[rows]))
    soft = np.vstack(softs)
    return PseudoLabeledSet(
        np.vstack(xs), np.concatenate(sources), np.argmax(soft, axis=1), soft, num_classes, "teacher"
    )


def ground_truth_set(datasets: Sequence[Dataset], fraction: float = 0.2, seed: int = 0) -> PseudoLabeledSet:
    """Supervised counterpart of :func:`generate_pseudo_labels` over the same rows."""
    if not datasets:
        raise ParameterError("need at least one dataset")
    num_classes = datasets[0].num_classes
    rng = make_rng(seed)
    xs, sources, labels = [], [], []
    for k, ds in enumerate(datasets):
        rows = select_rows(len(ds), fraction, rng)
        xs.append(ds.inputs[rows])
        sources.append(np.full(rows.size, k))
        labels.append(ds.labels[rows])
    hard = np.concatenate(labels)
    soft = np.eye(num_classes)[hard]
    return PseudoLabeledSet(np.vstack(xs), np.concatenate(sources), hard, soft, num_classes, "ground_truth")


def ce_loss(pred, target_class: int) -> float:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if not 0 <= target_class < pred.size:
        raise ParameterError(f"class index {target_class} outside [0, {pred.size})")
    return float(-np.log(np.clip(pred[target_class], PROB_CLAMP, 1.0)))


def kl_loss(teacher, student) -> float:
    """KL(teacher || student); classes where the teacher puts zero mass contribute nothing."""
    p = np.asarray(teacher, dtype=np.float64).ravel()
    q = np.asarray(student, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ShapeError(f"distributions of length {p.size} and {q.size}")
    mask = p > 0
    pc = np.clip(p[mask], PROB_CLAMP, 1.0)
    qc = np.clip(q[mask], PROB_CLAMP, 1.0)
    return float(np.sum(p[mask] * np.log(pc / qc)))


def batch_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(p, PROB_CLAMP, 1.0))))


def batch_kl(teacher: np.ndarray, student: np.ndarray) -> float:
    p = np.clip(teacher, PROB_CLAMP, 1.0)
    q = np.clip(student, PROB_CLAMP, 1.0)
    terms = np.where(teacher > 0, teacher * np.log(p / q), 0.0)
    return float(terms.sum(axis=1).mean())


def distill_objective(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """alpha * CE(y, p) + (1 - alpha) * T^2 * KL(teacher_T || student_T), batch mean.

    Returns the loss and its gradient with respect to the student logits.
    """
    n = student_logits.shape[0]
    probs = softmax(student_logits)
    soft_s = softmax(student_logits, temperature)
    soft_t = softmax(teacher_logits, temperature)
    loss = alpha * batch_ce(probs, labels) + (1.0 - alpha) * temperature**2 * batch_kl(soft_t, soft_s)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    grad = alpha * (probs - onehot) + (1.0 - alpha) * temperature * (soft_s - soft_t)
    return loss, grad / n


def distill_loss_and_grads(
    student: ModelCheckpoint,
    teacher_logits: np.ndarray,
    batch: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    temperature: float,
) -> tuple[float, list[np.ndarray]]:
    tensors = student.tensors()
    out, cache = _forward_params(student.arch, tensors, as_matrix(batch))
    loss, grad = distill_objective(out, teacher_logits, np.asarray(labels), alpha, temperature)
    return loss, _backward_params(student.arch, tensors, cache, grad)


def hetero_distill(
    teacher: ModelCheckpoint,
    student_init: ModelCheckpoint,
    train: Dataset,
    cfg: DistillConfig = DistillConfig(),
) -> ModelCheckpoint:
    """Train a student of the target architecture to imitate ``teacher``.

    The student starts from ``student_init`` and keeps its base fingerprint,
    so students distilled from different teachers stay merge-compatible.
    """
    if teacher.arch.num_classes != student_init.arch.num_classes:
        raise CompatibilityError(
            f"teacher emits {teacher.arch.num_classes} classes, student {student_init.arch.num_classes}"
        )
    if student_init.meta.role not in ("pretrained", "task"):
        raise ParameterError(f"student must start from a pretrained or task model, got {student_init.meta.role!r}")
    if train.inputs.shape[1] != student_init.arch.input_dim or train.inputs.shape[1] != teacher.arch.input_dim:
        raise ShapeError("training inputs do not match teacher/student input width")
    teacher_logits, _ = _forward_params(teacher.arch, teacher.tensors(), train.inputs)
    rng = make_rng(cfg.seed)
    vector = student_init.flat()
    state = OptimizerState.zeros(
        vector.size, base_lr=cfg.lr, decay_every=cfg.decay_every, decay_factor=cfg.decay_factor
    )
    shapes = [p.shape for p in student_init.tensors()]
    sizes = [p.size for p in student_init.tensors()]
    n = len(train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            tensors = _split(vector, shapes, sizes)
            out, cache = _forward_params(student_init.arch, tensors, train.inputs[rows])
            _, grad = distill_objective(out, teacher_logits[rows], train.labels[rows], cfg.alpha, cfg.temperature)
            grads = _backward_params(student_init.arch, tensors, cache, grad)
            vector, state = adam_step(vector, np.concatenate([g.ravel() for g in grads]), state, epoch)
    return student_init.from_flat(vector, role="distilled", task_id=teacher.meta.task_id)


def align_architectures(
    models: Sequence[ModelCheckpoint],
    target_init: ModelCheckpoint,
    train_sets: Sequence[Dataset],
    cfg: DistillConfig = DistillConfig(),
) -> list[ModelCheckpoint]:
    """Bring every model onto one architecture before merging.

    If all models already share an architecture they are returned as-is;
    otherwise each model whose architecture differs from ``target_init`` is
    distilled into it on its own training set.
    """
    if all(m.arch == models[0].arch for m in models):
        return list(models)
    out = []
    for model, ds in zip(models, train_sets, strict=True):
        if model.arch != target_init.arch:
            model = hetero_distill(model, target_init, ds, cfg)
        out.append(model)
    return out


def save_pseudo_set(ps: PseudoLabeledSet, path: str | os.PathLike, info: dict | None = None):
    header = {
        "kind": "pseudoset",
        "num_classes": ps.num_classes,
        "label_source": ps.label_source,
        "info": info or {},
    }
    return fileformat.write(
        path,
        header,
        [
            ("inputs", ps.inputs, "f64"),
            ("hard_label", ps.hard_label, "u32"),
            ("soft_label", ps.soft_label, "f64"),
            ("source_task", ps.source_task, "u32"),
        ],
    )


def load_pseudo_set(path: str | os.PathLike) -> PseudoLabeledSet:
    header, t = fileformat.read(path, kind="pseudoset")
    return PseudoLabeledSet(
        t["inputs"], t["source_task"], t["hard_label"], t["soft_label"],
        int(header["num_classes"]), header.get("label_source", "teacher"),
    )

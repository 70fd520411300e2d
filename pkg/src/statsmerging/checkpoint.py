"""Feed-forward classifiers: architecture, forward/backward, fine-tuning and I/O."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import fileformat
from .errors import CompatibilityError, FormatError, ParameterError, ShapeError
from .numerics import OptimizerState, adam_step, as_matrix, make_rng

ACTIVATIONS = ("relu", "identity")
ROLES = ("pretrained", "task", "merged", "distilled")
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


@dataclass(frozen=True)
class ArchSpec:
    """Ordered dense layers; the last layer's output is the logit vector."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        layers = tuple(LayerSpec(*l) if not isinstance(l, LayerSpec) else l for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ParameterError("an architecture needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {layer.activation!r}")
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise ParameterError("layer dimensions must be positive")

    @classmethod
    def mlp(cls, dims: Sequence[int], activation: str = "relu") -> ArchSpec:
        """``dims = [d_in, h_1, ..., C]``; hidden layers use ``activation``, the head is linear."""
        n = len(dims) - 1
        return cls(
            tuple(
                LayerSpec(dims[i], dims[i + 1], activation if i < n - 1 else "identity")
                for i in range(n)
            )
        )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def param_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        shapes = []
        for l, layer in enumerate(self.layers):
            shapes.append((f"layer{l}.weight", (layer.out_dim, layer.in_dim)))
            shapes.append((f"layer{l}.bias", (1, layer.out_dim)))
        return shapes

    def to_json(self) -> list:
        return [[l.in_dim, l.out_dim, l.activation] for l in self.layers]

    @classmethod
    def from_json(cls, data: list) -> ArchSpec:
        return cls(tuple(LayerSpec(int(a), int(b), str(c)) for a, b, c in data))


@dataclass(frozen=True)
class CheckpointMeta:
    role: str
    base_fingerprint: int
    task_id: str | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ParameterError(f"unknown role {self.role!r}")


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    meta: CheckpointMeta

    def __post_init__(self):
        expected = self.arch.param_shapes()
        if [n for n, _ in expected] != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match architecture")
        frozen = {}
        for name, shape in expected:
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.arch == other.arch
            and self.meta == other.meta
            and all(np.array_equal(a, b) for a, b in zip(self.params.values(), other.params.values()))
        )

    @property
    def fingerprint(self) -> int:
        return self.meta.base_fingerprint

    def tensors(self) -> list[np.ndarray]:
        return list(self.params.values())

    def layer_params(self, l: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[f"layer{l}.weight"], self.params[f"layer{l}.bias"]

    def with_params(self, params: dict[str, np.ndarray] | Iterable[np.ndarray], **meta) -> ModelCheckpoint:
        if not isinstance(params, dict):
            params = dict(zip(self.params, params))
        return ModelCheckpoint(self.arch, params, replace(self.meta, **meta))

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def from_flat(self, vector: np.ndarray, **meta) -> ModelCheckpoint:
        params = {}
        offset = 0
        for name, p in self.params.items():
            params[name] = vector[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        return self.with_params(params, **meta)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        inputs = as_matrix(self.inputs)
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if inputs.shape[0] < 1:
            raise ParameterError("a dataset needs at least one row")
        if labels.shape[0] != inputs.shape[0]:
            raise ShapeError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )

    def subset(self, rows: np.ndarray) -> Dataset:
        return Dataset(self.inputs[rows], self.labels[rows], self.num_classes)


def param_fingerprint(arch: ArchSpec, params: Iterable[np.ndarray]) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(repr(arch.to_json()).encode())
    for p in params:
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return int.from_bytes(h.digest(), "little")


def init_checkpoint(arch: ArchSpec, seed: int, zero: bool = False) -> ModelCheckpoint:
    """Fresh ``pretrained``-role model: Kaiming-uniform weights, zero biases."""
    rng = make_rng(seed)
    params = {}
    for l, layer in enumerate(arch.layers):
        if zero:
            w = np.zeros((layer.out_dim, layer.in_dim))
        else:
            bound = np.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim))
        params[f"layer{l}.weight"] = w
        params[f"layer{l}.bias"] = np.zeros((1, layer.out_dim))
    fp = param_fingerprint(arch, params.values())
    return ModelCheckpoint(arch, params, CheckpointMeta("pretrained", fp))


def as_pretrained(ckpt: ModelCheckpoint) -> ModelCheckpoint:
    """Re-stamp ``ckpt`` as a base model whose fingerprint is its own parameter hash."""
    fp = param_fingerprint(ckpt.arch, ckpt.tensors())
    return ModelCheckpoint(ckpt.arch, dict(ckpt.params), CheckpointMeta("pretrained", fp))


def merge_compatible(a: ModelCheckpoint, b: ModelCheckpoint) -> bool:
    return a.arch == b.arch and a.meta.base_fingerprint == b.meta.base_fingerprint


def check_compatible(ckpts: Sequence[ModelCheckpoint]) -> None:
    if not ckpts:
        raise ParameterError("at least one checkpoint is required")
    for i, c in enumerate(ckpts[1:], start=1):
        if not merge_compatible(ckpts[0], c):
            raise CompatibilityError(
                f"checkpoint {i} differs from checkpoint 0 in architecture or base fingerprint"
            )


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_batch(arch: ArchSpec, batch: np.ndarray) -> np.ndarray:
    batch = as_matrix(batch)
    if batch.shape[1] != arch.input_dim:
        raise ShapeError(f"batch has {batch.shape[1]} features, model expects {arch.input_dim}")
    return batch


def _forward_params(arch: ArchSpec, tensors: Sequence[np.ndarray], batch: np.ndarray):
    """Logits plus the per-layer (input, pre-activation) cache needed by backward."""
    cache = []
    a = batch
    for l, layer in enumerate(arch.layers):
        w, b = tensors[2 * l], tensors[2 * l + 1]
        z = a @ w.T + b
        cache.append((a, z))
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return a, cache


def _backward_params(arch: ArchSpec, tensors: Sequence[np.ndarray], cache, grad: np.ndarray):
    grads: list[np.ndarray] = [None] * (2 * arch.num_layers)  # type: ignore[list-item]
    for l in range(arch.num_layers - 1, -1, -1):
        a_in, z = cache[l]
        if arch.layers[l].activation == "relu":
            grad = grad * (z > 0)
        grads[2 * l] = grad.T @ a_in
        grads[2 * l + 1] = grad.sum(axis=0, keepdims=True)
        if l:
            grad = grad @ tensors[2 * l]
    return grads


def logits(ckpt: ModelCheckpoint, batch: np.ndarray) -> np.ndarray:
    batch = _check_batch(ckpt.arch, batch)
    out, _ = _forward_params(ckpt.arch, ckpt.tensors(), batch)
    return out


def forward(ckpt: ModelCheckpoint, batch: np.ndarray) -> np.ndarray:
    """Class probabilities, one softmax-normalized row per input row."""
    return softmax(logits(ckpt, batch))


def backward(ckpt: ModelCheckpoint, batch: np.ndarray, loss_grad_at_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, in ``ckpt.params`` order.

    ``loss_grad_at_logits`` is dLoss/dlogits with shape ``N x C``.
    """
    batch = _check_batch(ckpt.arch, batch)
    upstream = as_matrix(loss_grad_at_logits)
    if upstream.shape != (batch.shape[0], ckpt.arch.num_classes):
        raise ShapeError(
            f"upstream gradient has shape {upstream.shape}, expected "
            f"{(batch.shape[0], ckpt.arch.num_classes)}"
        )
    tensors = ckpt.tensors()
    _, cache = _forward_params(ckpt.arch, tensors, batch)
    return _backward_params(ckpt.arch, tensors, cache, upstream)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean of -log(clamp(p[label])) over rows."""
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.clip(p, PROB_CLAMP, 1.0))))


def fine_tune(
    base: ModelCheckpoint,
    train: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    task_id: str | None = None,
    role: str = "task",
) -> ModelCheckpoint:
    """Mini-batch cross-entropy training with Adam at a constant rate.

    The result keeps ``base``'s architecture and fingerprint, so every model
    tuned from one base is merge-compatible with the others.
    """
    if base.meta.role != "pretrained":
        raise ParameterError(f"fine_tune expects a pretrained base, got role {base.meta.role!r}")
    if train.inputs.shape[1] != base.arch.input_dim:
        raise ShapeError(f"dataset has {train.inputs.shape[1]} features, model expects {base.arch.input_dim}")
    if train.num_classes != base.arch.num_classes:
        raise ShapeError(f"dataset has {train.num_classes} classes, model emits {base.arch.num_classes}")
    rng = make_rng(seed)
    vector = base.flat()
    state = OptimizerState.zeros(vector.size, base_lr=lr, decay_every=max(epochs, 1) + 1)
    shapes = [p.shape for p in base.tensors()]
    sizes = [p.size for p in base.tensors()]
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start : start + batch_size]
            x, y = train.inputs[rows], train.labels[rows]
            tensors = _split(vector, shapes, sizes)
            out, cache = _forward_params(base.arch, tensors, x)
            grad = softmax(out)
            grad[np.arange(len(y)), y] -= 1.0
            grad /= len(y)
            grads = _backward_params(base.arch, tensors, cache, grad)
            vector, state = adam_step(vector, np.concatenate([g.ravel() for g in grads]), state, epoch)
    return base.from_flat(vector, role=role, task_id=task_id)


def _split(vector: np.ndarray, shapes, sizes) -> list[np.ndarray]:
    out = []
    offset = 0
    for shape, size in zip(shapes, sizes):
        out.append(vector[offset : offset + size].reshape(shape))
        offset += size
    return out


def _meta_to_json(meta: CheckpointMeta) -> dict:
    return {
        "role": meta.role,
        "task_id": meta.task_id,
        "base_fingerprint": f"{meta.base_fingerprint:016x}",
        "info": meta.info,
    }


def checkpoint_header(ckpt: ModelCheckpoint) -> dict:
    return {"kind": "checkpoint", "arch": ckpt.arch.to_json(), "meta": _meta_to_json(ckpt.meta)}


def save(ckpt: ModelCheckpoint, path: str | os.PathLike):
    return fileformat.write(path, checkpoint_header(ckpt), [(n, p, "f64") for n, p in ckpt.params.items()])


def load(path: str | os.PathLike) -> ModelCheckpoint:
    header, tensors = fileformat.read(path, kind="checkpoint")
    try:
        arch = ArchSpec.from_json(header["arch"])
        m = header["meta"]
        meta = CheckpointMeta(m["role"], int(m["base_fingerprint"], 16), m.get("task_id"), m.get("info", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}", 12) from exc
    return ModelCheckpoint(arch, tensors, meta)


def save_dataset(ds: Dataset, path: str | os.PathLike, info: dict | None = None):
    header = {"kind": "dataset", "num_classes": ds.num_classes, "info": info or {}}
    return fileformat.write(path, header, [("inputs", ds.inputs, "f64"), ("labels", ds.labels, "u32")])


def load_dataset(path: str | os.PathLike) -> Dataset:
    header, tensors = fileformat.read(path, kind="dataset")
    return Dataset(tensors["inputs"], tensors["labels"].ravel(), int(header["num_classes"]))

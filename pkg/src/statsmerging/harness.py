"""Synthetic multi-task benchmark, evaluation, and end-to-end experiment runs."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import (
    ArchSpec,
    Dataset,
    ModelCheckpoint,
    as_pretrained,
    fine_tune,
    forward,
    init_checkpoint,
    merge_compatible,
)
from .coefficients import CoefficientTable
from .distill import DistillConfig, PseudoLabeledSet, align_architectures, generate_pseudo_labels, ground_truth_set
from .errors import ParameterError, ShapeError, StageError, StatsMergingError
from .learner import SMLTrainConfig, SMLTrainResult, train_sml
from .merge import stats_merge, task_arithmetic, ties_merge, weight_average
from .numerics import make_rng
from .stats import StatsConfig

SCALING_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
ROBUSTNESS_SIGMAS = (0.05, 0.1, 0.2)


@dataclass(frozen=True)
class TaskSuiteConfig:
    num_tasks: int = 4
    classes_per_task: int = 4
    input_dim: int = 16
    n_train: int = 800
    n_val: int = 200
    n_test: int = 400
    cluster_separation: float = 4.0
    task_spread: float = 3.0
    noise: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    pretrain_epochs: int = 3
    pretrain_lr: float = 1e-3
    finetune_epochs: tuple[int, ...] = (5, 10, 20, 40)
    finetune_lr: tuple[float, ...] = (1e-3, 2e-3, 4e-3, 8e-3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        counts = (self.num_tasks, self.classes_per_task, self.input_dim, self.n_train, self.n_val, self.n_test)
        if min(counts) < 1:
            raise ParameterError("task suite counts must all be at least 1")
        # a scalar budget applies to every task; tuples are cycled to num_tasks
        for name, cast in (("finetune_epochs", int), ("finetune_lr", float)):
            value = getattr(self, name)
            values = tuple(cast(v) for v in value) if isinstance(value, (list, tuple)) else (cast(value),)
            if not values:
                raise ParameterError(f"{name} must not be empty")
            object.__setattr__(self, name, tuple(values[k % len(values)] for k in range(self.num_tasks)))
        if self.pretrain_epochs < 0 or min(self.finetune_epochs) < 0:
            raise ParameterError("epoch counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    def arch(self, hidden: Sequence[int] | None = None) -> ArchSpec:
        hidden = self.hidden if hidden is None else tuple(hidden)
        return ArchSpec.mlp([self.input_dim, *hidden, self.num_classes])


@dataclass(frozen=True)
class TaskData:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class TaskSuite:
    tasks: list[TaskData]
    pretrain: Dataset

    def val_inputs(self) -> list[np.ndarray]:
        return [t.val.inputs for t in self.tasks]


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def _random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def gen_tasks(cfg: TaskSuiteConfig) -> TaskSuite:
    """Gaussian-cluster classification tasks over one shared label space.

    Task k owns classes ``[k*c, (k+1)*c)``. Its class means are a task offset
    plus ``cluster_separation`` times rotated, randomly signed axis
    directions; the rotation is drawn per task. Samples add isotropic noise.
    The pretraining set pools a slice of every task's training split.
    """
    rng = make_rng(cfg.seed)
    c = cfg.classes_per_task
    d = cfg.input_dim
    tasks = []
    pool_x, pool_y = [], []
    for k in range(cfg.num_tasks):
        rotation = _random_rotation(rng, d)
        offset = rng.standard_normal(d) * cfg.task_spread * cfg.cluster_separation / np.sqrt(d)
        directions = np.zeros((c, d))
        directions[np.arange(c), np.arange(c) % d] = rng.choice([-1.0, 1.0], size=c)
        means = offset + cfg.cluster_separation * directions @ rotation.T

        def sample(n: int) -> Dataset:
            local = np.arange(n) % c
            rng.shuffle(local)
            x = means[local] + cfg.noise * rng.standard_normal((n, d))
            return Dataset(x, local + k * c, cfg.num_classes)

        train, val, test = sample(cfg.n_train), sample(cfg.n_val), sample(cfg.n_test)
        tasks.append(TaskData(train, val, test))
        take = max(1, cfg.n_train // cfg.num_tasks)
        pool_x.append(train.inputs[:take])
        pool_y.append(train.labels[:take])
    pretrain = Dataset(np.vstack(pool_x), np.concatenate(pool_y), cfg.num_classes)
    return TaskSuite(tasks, pretrain)


def predict(ckpt: ModelCheckpoint, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward(ckpt, inputs), axis=1)


def evaluate(ckpt: ModelCheckpoint, test: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if test.inputs.shape[1] != ckpt.arch.input_dim:
        raise ShapeError(f"test inputs have {test.inputs.shape[1]} features, model expects {ckpt.arch.input_dim}")
    return float(np.mean(predict(ckpt, test.inputs) == test.labels))


def pseudo_accuracy(ckpt: ModelCheckpoint, pseudo_set: PseudoLabeledSet) -> float:
    return float(np.mean(predict(ckpt, pseudo_set.inputs) == pseudo_set.hard_label))


def corrupt_gaussian(ds: Dataset, sigma: float, seed: int) -> Dataset:
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    if sigma == 0:
        return ds
    noise = make_rng(seed).standard_normal(ds.inputs.shape)
    return Dataset(ds.inputs + sigma * noise, ds.labels, ds.num_classes)


def grid_search_scaling(
    build: Callable[[float], ModelCheckpoint],
    pseudo_set: PseudoLabeledSet,
    grid: Sequence[float] = SCALING_GRID,
) -> tuple[float, ModelCheckpoint]:
    """Pick the scaling factor whose merged model best fits the pseudo labels.

    Ties go to the earliest grid entry.
    """
    best = None
    for value in grid:
        model = build(value)
        acc = pseudo_accuracy(model, pseudo_set)
        if best is None or acc > best[0]:
            best = (acc, value, model)
    return best[1], best[2]


@dataclass(frozen=True)
class MethodSpec:
    """A merge method as configured before any model exists.

    ``scaling=None`` grid-searches the task-arithmetic / Ties factor on the
    pseudo-labeled validation set. ``label_mode`` / ``pseudo_fraction``
    override the learner config for ``stats`` methods.
    """

    name: str
    method: str
    mode: str = "layer_wise"
    scaling: float | None = None
    keep_fraction: float = 0.2
    label_mode: str | None = None
    pseudo_fraction: float | None = None
    delta: bool = False

    def __post_init__(self):
        if self.method not in ("stats", "weight_avg", "task_arithmetic", "ties"):
            raise ParameterError(f"unknown merge method {self.method!r}")
        if self.mode not in ("task_wise", "layer_wise"):
            raise ParameterError(f"unknown mode {self.mode!r}")


DEFAULT_METHODS = (
    MethodSpec("Weight Averaging", "weight_avg"),
    MethodSpec("Task Arithmetic", "task_arithmetic"),
    MethodSpec("Ties-Merging", "ties"),
    MethodSpec("TW StatsMerging", "stats", "task_wise"),
    MethodSpec("LW StatsMerging", "stats", "layer_wise"),
)


@dataclass
class ReportRow:
    method: str
    per_task: dict[str, float]
    avg_acc: float
    kind: str = "merged"


@dataclass
class ExperimentReport:
    config: dict
    rows: list[ReportRow]
    coefficients: dict[str, dict] = field(default_factory=dict)
    robustness: dict[str, dict[str, float]] = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def avg(self, method: str) -> float:
        return self.row(method).avg_acc

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "config": self.config,
            "rows": [asdict(r) for r in self.rows],
            "coefficients": self.coefficients,
            "robustness": self.robustness,
            "details": self.details,
        }
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True)

    def to_text(self) -> str:
        tasks = list(self.rows[0].per_task)
        name_w = max(len("Method"), *(len(r.method) for r in self.rows))
        head = f"{'Method':<{name_w}} | " + " ".join(f"{t:>7}" for t in tasks) + " | Avg Acc"
        lines = [head, "-" * len(head)]
        for i, r in enumerate(self.rows):
            if i and r.kind != self.rows[i - 1].kind:
                lines.append("=" * len(head))
            cells = " ".join(f"{100 * r.per_task[t]:7.1f}" for t in tasks)
            lines.append(f"{r.method:<{name_w}} | {cells} | {100 * r.avg_acc:7.1f}")
        for sigma, accs in self.robustness.items():
            lines.append("")
            lines.append(f"Gaussian noise sigma={sigma}")
            for method, acc in accs.items():
                lines.append(f"  {method:<{name_w}} {100 * acc:7.1f}")
        return "\n".join(lines) + "\n"


def make_row(method: str, models: Sequence[ModelCheckpoint] | ModelCheckpoint, tests: Sequence[Dataset], kind="merged") -> ReportRow:
    if isinstance(models, ModelCheckpoint):
        models = [models] * len(tests)
    per_task = {f"task{k}": evaluate(m, t) for k, (m, t) in enumerate(zip(models, tests))}
    return ReportRow(method, per_task, float(np.mean(list(per_task.values()))), kind)


class _Stage:
    def __init__(self, timings: dict, name: str):
        self.timings = timings
        self.name = name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.start
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class MergeOutcome:
    model: ModelCheckpoint
    coefficients: CoefficientTable | None = None
    scaling: float | None = None
    training: SMLTrainResult | None = None


def pretrain_base(suite_cfg: TaskSuiteConfig, suite: TaskSuite, hidden=None, tag: int = 0) -> ModelCheckpoint:
    """Briefly train a fresh model on the pooled data and stamp it as the shared base."""
    arch = suite_cfg.arch(hidden)
    init = init_checkpoint(arch, derive_seed(suite_cfg.seed, 1, tag))
    trained = fine_tune(
        init, suite.pretrain, suite_cfg.pretrain_epochs, suite_cfg.pretrain_lr,
        derive_seed(suite_cfg.seed, 2, tag), role="pretrained",
    )
    return as_pretrained(trained)


def finetune_tasks(suite_cfg: TaskSuiteConfig, suite: TaskSuite, base: ModelCheckpoint, tag: int = 0) -> list[ModelCheckpoint]:
    return [
        fine_tune(
            base, t.train, suite_cfg.finetune_epochs[k], suite_cfg.finetune_lr[k],
            derive_seed(suite_cfg.seed, 3, tag, k), task_id=f"task{k}",
        )
        for k, t in enumerate(suite.tasks)
    ]


def run_method(
    spec: MethodSpec,
    base: ModelCheckpoint,
    task_ckpts: Sequence[ModelCheckpoint],
    pseudo_set: PseudoLabeledSet,
    sml_cfg: SMLTrainConfig,
    stats_cfg: StatsConfig,
    labeled_set: PseudoLabeledSet | None = None,
) -> MergeOutcome:
    if spec.method == "weight_avg":
        return MergeOutcome(weight_average(task_ckpts))
    if spec.method in ("task_arithmetic", "ties"):
        if spec.method == "task_arithmetic":
            build = lambda s: task_arithmetic(base, task_ckpts, s)  # noqa: E731
        else:
            build = lambda s: ties_merge(base, task_ckpts, s, spec.keep_fraction)  # noqa: E731
        if spec.scaling is not None:
            return MergeOutcome(build(spec.scaling), scaling=spec.scaling)
        scaling, model = grid_search_scaling(build, pseudo_set)
        return MergeOutcome(model, scaling=scaling)
    cfg = sml_cfg
    if spec.label_mode is not None:
        cfg = replace(cfg, label_mode=spec.label_mode)
    if spec.pseudo_fraction is not None:
        cfg = replace(cfg, pseudo_fraction=spec.pseudo_fraction)
    training_set = labeled_set if cfg.label_mode == "ground_truth" else pseudo_set
    if training_set is None:
        raise ParameterError("ground_truth training needs a labeled set")
    result = train_sml(task_ckpts, training_set, cfg, stats_cfg, spec.mode)
    merged = stats_merge(task_ckpts, result.coefficients, base, spec.delta)
    return MergeOutcome(merged, result.coefficients, training=result)


def _table_json(table: CoefficientTable) -> dict:
    return {"mode": table.mode, "values": table.values.tolist()}


def run_experiment(
    suite_cfg: TaskSuiteConfig = TaskSuiteConfig(),
    methods: Sequence[MethodSpec] = DEFAULT_METHODS,
    sml_cfg: SMLTrainConfig = SMLTrainConfig(),
    stats_cfg: StatsConfig = StatsConfig(),
    corruption_sigmas: Sequence[float] = ROBUSTNESS_SIGMAS,
    keep_outcomes: dict | None = None,
) -> ExperimentReport:
    """Data -> base -> task models -> pseudo labels -> each merge method -> test accuracy.

    Pass a dict as ``keep_outcomes`` to receive the trained models and
    learner histories alongside the report.
    """
    timings: dict[str, float] = {}
    with _Stage(timings, "gen_tasks"):
        suite = gen_tasks(suite_cfg)
    with _Stage(timings, "pretrain"):
        base = pretrain_base(suite_cfg, suite)
    with _Stage(timings, "fine_tune"):
        task_ckpts = finetune_tasks(suite_cfg, suite, base)
    tests = [t.test for t in suite.tasks]

    pseudo_sets: dict[float, PseudoLabeledSet] = {}
    labeled_sets: dict[float, PseudoLabeledSet] = {}

    def pseudo_for(fraction: float) -> PseudoLabeledSet:
        if fraction not in pseudo_sets:
            with _Stage(timings, "pseudo_labels"):
                pseudo_sets[fraction] = generate_pseudo_labels(
                    task_ckpts, suite.val_inputs(), fraction, derive_seed(sml_cfg.seed, 4)
                )
        return pseudo_sets[fraction]

    def labeled_for(fraction: float) -> PseudoLabeledSet:
        if fraction not in labeled_sets:
            labeled_sets[fraction] = ground_truth_set(
                [t.val for t in suite.tasks], fraction, derive_seed(sml_cfg.seed, 4)
            )
        return labeled_sets[fraction]

    rows = [
        make_row("Pre-Trained", base, tests, kind="reference"),
        make_row("Individual", task_ckpts, tests, kind="reference"),
    ]
    coefficients = {}
    details: dict = {"scaling": {}, "final_loss": {}}
    outcomes = {}
    for spec in methods:
        fraction = spec.pseudo_fraction or sml_cfg.pseudo_fraction
        with _Stage(timings, f"method:{spec.name}"):
            labeled = None
            if spec.method == "stats" and (spec.label_mode or sml_cfg.label_mode) == "ground_truth":
                labeled = labeled_for(fraction)
            outcome = run_method(spec, base, task_ckpts, pseudo_for(fraction), sml_cfg, stats_cfg, labeled)
        if not merge_compatible(outcome.model, task_ckpts[0]):
            raise StageError(f"method:{spec.name}", ParameterError("merged model lost its base fingerprint"))
        outcomes[spec.name] = outcome
        rows.append(make_row(spec.name, outcome.model, tests))
        if outcome.coefficients is not None:
            coefficients[spec.name] = _table_json(outcome.coefficients)
        if outcome.scaling is not None:
            details["scaling"][spec.name] = outcome.scaling
        if outcome.training is not None:
            details["final_loss"][spec.name] = outcome.training.history[-1].loss

    robustness = {}
    for i, sigma in enumerate(corruption_sigmas):
        noisy = [corrupt_gaussian(t, sigma, derive_seed(suite_cfg.seed, 5, i, k)) for k, t in enumerate(tests)]
        robustness[repr(float(sigma))] = {
            name: make_row(name, o.model, noisy).avg_acc for name, o in outcomes.items()
        }

    if keep_outcomes is not None:
        keep_outcomes.update(
            suite=suite, base=base, task_ckpts=task_ckpts, outcomes=outcomes,
            pseudo_sets=pseudo_sets, labeled_sets=labeled_sets,
        )
    config = {
        "suite": asdict(suite_cfg),
        "sml": asdict(sml_cfg),
        "stats": asdict(stats_cfg),
        "methods": [asdict(m) for m in methods],
        "corruption_sigmas": [float(s) for s in corruption_sigmas],
    }
    return ExperimentReport(config, rows, coefficients, robustness, details, timings)


def run_hetero_experiment(
    suite_cfg: TaskSuiteConfig = TaskSuiteConfig(),
    sml_cfg: SMLTrainConfig = SMLTrainConfig(),
    stats_cfg: StatsConfig = StatsConfig(),
    distill_cfg: DistillConfig = DistillConfig(),
    teacher_hidden: Sequence[int] = (128, 128),
    student_hidden: Sequence[int] = (32, 32, 32),
    native_tasks: Sequence[int] = (0,),
    keep_outcomes: dict | None = None,
) -> ExperimentReport:
    """Merging across architectures.

    Tasks listed in ``native_tasks`` are fine-tuned directly in the student
    (target) architecture; the rest are fine-tuned in the teacher
    architecture and distilled into the target before merging. Each task's
    fine-tuned model, whatever its architecture, is its pseudo-label teacher.
    """
    timings: dict[str, float] = {}
    with _Stage(timings, "gen_tasks"):
        suite = gen_tasks(suite_cfg)
    with _Stage(timings, "pretrain"):
        teacher_base = pretrain_base(suite_cfg, suite, teacher_hidden, tag=1)
        target_base = pretrain_base(suite_cfg, suite, student_hidden, tag=2)
    with _Stage(timings, "fine_tune"):
        teacher_models = finetune_tasks(suite_cfg, suite, teacher_base, tag=1)
        native_models = finetune_tasks(suite_cfg, suite, target_base, tag=2)
        originals = [native_models[k] if k in native_tasks else teacher_models[k] for k in range(len(suite.tasks))]
    with _Stage(timings, "distill"):
        students = align_architectures(
            originals, target_base, [t.train for t in suite.tasks],
            replace(distill_cfg, seed=derive_seed(distill_cfg.seed, 6)),
        )
    tests = [t.test for t in suite.tasks]
    with _Stage(timings, "pseudo_labels"):
        pseudo = generate_pseudo_labels(
            originals, suite.val_inputs(), sml_cfg.pseudo_fraction, derive_seed(sml_cfg.seed, 4)
        )

    rows = [
        make_row("Individual", originals, tests, kind="reference"),
        make_row("Distilled", students, tests, kind="reference"),
    ]
    outcomes = {}
    specs = (
        MethodSpec("Weight Averaging", "weight_avg"),
        MethodSpec("Ties-Merging", "ties"),
        MethodSpec("Task Arithmetic", "task_arithmetic"),
        MethodSpec("LW StatsMerging", "stats", "layer_wise"),
    )
    coefficients = {}
    details: dict = {"scaling": {}, "distilled_tasks": [k for k in range(len(tests)) if k not in native_tasks]}
    for spec in specs:
        with _Stage(timings, f"method:{spec.name}"):
            outcome = run_method(spec, target_base, students, pseudo, sml_cfg, stats_cfg)
        outcomes[spec.name] = outcome
        rows.append(make_row(spec.name, outcome.model, tests))
        if outcome.coefficients is not None:
            coefficients[spec.name] = _table_json(outcome.coefficients)
        if outcome.scaling is not None:
            details["scaling"][spec.name] = outcome.scaling
    if keep_outcomes is not None:
        keep_outcomes.update(
            suite=suite, originals=originals, students=students, outcomes=outcomes, target_base=target_base
        )
    config = {
        "suite": asdict(suite_cfg),
        "sml": asdict(sml_cfg),
        "stats": asdict(stats_cfg),
        "distill": asdict(distill_cfg),
        "teacher_hidden": list(teacher_hidden),
        "student_hidden": list(student_hidden),
        "native_tasks": list(native_tasks),
    }
    return ExperimentReport(config, rows, coefficients, {}, details, timings)


def export_heatmap(coeffs: CoefficientTable, path: str | os.PathLike) -> Path:
    """CSV ``task,layer,lambda``; task-wise tables use layer ``all``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "layer", "lambda"])
        if coeffs.mode == "task_wise":
            for k, v in enumerate(coeffs.values):
                writer.writerow([k, "all", format(float(v), ".17g")])
        else:
            for k in range(coeffs.values.shape[0]):
                for l in range(coeffs.values.shape[1]):
                    writer.writerow([k, l, format(float(coeffs.values[k, l]), ".17g")])
    return path


def read_heatmap(path: str | os.PathLike) -> CoefficientTable:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["task", "layer", "lambda"]:
            raise StatsMergingError(f"unexpected heatmap header {reader.fieldnames}")
        records = [(int(r["task"]), r["layer"], float(r["lambda"])) for r in reader]
    if all(layer == "all" for _, layer, _ in records):
        values = np.zeros(max(k for k, _, _ in records) + 1)
        for k, _, v in records:
            values[k] = v
        return CoefficientTable("task_wise", values)
    k_max = max(k for k, _, _ in records) + 1
    l_max = max(int(l) for _, l, _ in records) + 1
    values = np.zeros((k_max, l_max))
    for k, l, v in records:
        values[k, int(l)] = v
    return CoefficientTable("layer_wise", values)

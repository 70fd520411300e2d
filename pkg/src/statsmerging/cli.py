"""Command-line entry point: ``statsmerging <subcommand> [options]``.

Every subcommand is a thin binding over one library operation. Outputs are
written under ``--workdir``. Exit status: 0 success, 1 domain error (the
error category is printed on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ck
from .coefficients import CoefficientTable
from .distill import DistillConfig, generate_pseudo_labels, hetero_distill, load_pseudo_set, save_pseudo_set
from .errors import ParameterError, StatsMergingError
from .harness import (
    DEFAULT_METHODS,
    MethodSpec,
    TaskSuiteConfig,
    evaluate,
    export_heatmap,
    gen_tasks,
    read_heatmap,
    run_experiment,
    run_hetero_experiment,
)
from .learner import SMLTrainConfig, load_sml, predict_coefficients, save_sml, train_sml
from .merge import stats_merge, task_arithmetic, ties_merge, weight_average
from .stats import StatsConfig, model_layer_stats

log = logging.getLogger("statsmerging")

SECTIONS = {
    "suite": TaskSuiteConfig,
    "stats": StatsConfig,
    "sml": SMLTrainConfig,
    "distill": DistillConfig,
}
PATH_KEYS = {"workdir": ".", "checkpoint_dir": "checkpoints"}


class ConfigError(StatsMergingError):
    category = "config"


@dataclasses.dataclass(frozen=True)
class CliConfig:
    suite: TaskSuiteConfig = TaskSuiteConfig()
    stats: StatsConfig = StatsConfig()
    sml: SMLTrainConfig = SMLTrainConfig()
    distill: DistillConfig = DistillConfig()
    methods: tuple[MethodSpec, ...] = DEFAULT_METHODS
    paths: dict = dataclasses.field(default_factory=lambda: dict(PATH_KEYS))

    def with_seed(self, seed: int | None) -> CliConfig:
        if seed is None:
            return self
        return dataclasses.replace(
            self,
            suite=dataclasses.replace(self.suite, seed=seed),
            sml=dataclasses.replace(self.sml, seed=seed),
            distill=dataclasses.replace(self.distill, seed=seed),
        )

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["methods"] = [dataclasses.asdict(m) for m in self.methods]
        out["paths"] = dict(self.paths)
        return out


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def parse_config(data: dict) -> CliConfig:
    """Strict parse: any key not in the schema is an error."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"methods", "paths"})
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    kwargs = {name: _build(cls, data[name], name) for name, cls in SECTIONS.items() if name in data}
    if "methods" in data:
        if not isinstance(data["methods"], list):
            raise ConfigError("methods must be a list")
        kwargs["methods"] = tuple(_build(MethodSpec, m, f"methods[{i}]") for i, m in enumerate(data["methods"]))
    if "paths" in data:
        paths = data["paths"]
        if not isinstance(paths, dict) or set(paths) - set(PATH_KEYS):
            raise ConfigError(f"paths accepts only: {', '.join(PATH_KEYS)}")
        kwargs["paths"] = {**PATH_KEYS, **paths}
    return CliConfig(**kwargs)


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(data)


def _workdir(args, cfg: CliConfig | None = None) -> Path:
    root = args.workdir or (cfg.paths["workdir"] if cfg else ".")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _out(args, default: str, cfg: CliConfig | None = None) -> Path:
    path = _workdir(args, cfg) / (args.out or default)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _heatmap_with_seed(table: CoefficientTable, path: Path, seed: int | None) -> None:
    export_heatmap(table, path)
    _write_json(path.with_name(path.name + ".json"), {"seed": seed, "mode": table.mode})


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    suite = gen_tasks(cfg.suite)
    out = _workdir(args, cfg) / (args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    info = {"seed": cfg.suite.seed}
    for k, task in enumerate(suite.tasks):
        for split in ("train", "val", "test"):
            ck.save_dataset(getattr(task, split), out / f"task{k}_{split}.smrg", info)
    ck.save_dataset(suite.pretrain, out / "pretrain.smrg", info)
    print(out)
    return 0


def cmd_finetune(args) -> int:
    train = ck.load_dataset(args.train)
    seed = 0 if args.seed is None else args.seed
    if args.base:
        base = ck.load(args.base)
        role = "task"
    else:
        if not args.arch:
            raise ParameterError("give --base to fine-tune or --arch to pretrain a new base")
        dims = [int(d) for d in args.arch.split(",")]
        base = ck.init_checkpoint(ck.ArchSpec.mlp(dims), seed)
        role = "pretrained"
    model = ck.fine_tune(base, train, args.epochs, args.lr, seed, args.batch_size, args.task_id, role=role)
    if role == "pretrained":
        model = ck.as_pretrained(model)
    model = model.with_params(model.params, info={"seed": seed})
    path = _out(args, "model.smrg")
    ck.save(model, path)
    print(path)
    return 0


def stats_rows(ckpts: Sequence[ck.ModelCheckpoint], cfg: StatsConfig) -> list[list]:
    rows = []
    for k, c in enumerate(ckpts):
        task_id = c.meta.task_id or f"task{k}"
        for l, s in enumerate(model_layer_stats(c, cfg)):
            rows.append([task_id, f"layer{l}.weight", s.mu, s.var, s.norm, *s.singular])
    return rows


def cmd_stats(args) -> int:
    cfg = StatsConfig(rank=args.rank, normalize=False)
    ckpts = [ck.load(p) for p in args.ckpt]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task_id", "layer_name", "mu", "var", "norm", *(f"sv{i + 1}" for i in range(cfg.rank))])
    for row in stats_rows(ckpts, cfg):
        writer.writerow([*row[:2], *(format(v, ".17g") for v in row[2:])])
    if args.out:
        _out(args, "stats.csv").write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_pseudo(args) -> int:
    ckpts = [ck.load(p) for p in args.ckpt]
    # only the input matrices are passed on; stored labels are never read
    inputs = [ck.load_dataset(p).inputs for p in args.val]
    seed = 0 if args.seed is None else args.seed
    ps = generate_pseudo_labels(ckpts, inputs, args.fraction, seed)
    path = _out(args, "pseudo.smrg")
    save_pseudo_set(ps, path, {"seed": seed, "fraction": args.fraction})
    print(path)
    return 0


def cmd_train_sml(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    sml_cfg = cfg.sml
    overrides = {k: v for k, v in (("epochs", args.epochs), ("label_mode", args.label_mode)) if v is not None}
    sml_cfg = dataclasses.replace(sml_cfg, **overrides)
    stats_cfg = cfg.stats if args.rank is None else dataclasses.replace(cfg.stats, rank=args.rank)
    ckpts = [ck.load(p) for p in args.ckpt]
    result = train_sml(ckpts, load_pseudo_set(args.pseudo), sml_cfg, stats_cfg, args.mode)
    path = _out(args, "sml.smrg", cfg)
    save_sml(result.params, path, stats_cfg, args.mode, {"seed": sml_cfg.seed})
    _heatmap_with_seed(result.coefficients, path.with_suffix(".coefficients.csv"), sml_cfg.seed)
    for rec in result.history:
        log.info("epoch %d lr %.1e loss %.6f", rec.epoch, rec.lr, rec.loss)
    print(path)
    return 0


def cmd_merge(args) -> int:
    ckpts = [ck.load(p) for p in args.ckpt]
    base = ck.load(args.base) if args.base else None
    coefficients = None
    if args.method == "weight_avg":
        merged = weight_average(ckpts)
    elif args.method == "stats":
        if not args.coeffs:
            raise ParameterError("stats merging needs --coeffs")
        coefficients = read_heatmap(args.coeffs)
        merged = stats_merge(ckpts, coefficients, base, args.delta)
    else:
        if base is None or args.scaling is None:
            raise ParameterError(f"{args.method} needs --base and --scaling")
        if args.method == "task_arithmetic":
            merged = task_arithmetic(base, ckpts, args.scaling)
        else:
            merged = ties_merge(base, ckpts, args.scaling, args.keep_fraction)
    path = _out(args, "merged.smrg")
    ck.save(merged, path)
    sidecar = {
        "method": args.method,
        "coefficients": None if coefficients is None else coefficients.values.tolist(),
        "scaling": args.scaling,
        "keep_fraction": args.keep_fraction if args.method == "ties" else None,
        "input_fingerprints": [f"{c.meta.base_fingerprint:016x}" for c in ckpts],
        "seed": args.seed,
    }
    _write_json(path.with_suffix(".json"), sidecar)
    print(path)
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    dcfg = cfg.distill if args.epochs is None else dataclasses.replace(cfg.distill, epochs=args.epochs)
    student = hetero_distill(ck.load(args.teacher), ck.load(args.student_init), ck.load_dataset(args.train), dcfg)
    student = student.with_params(student.params, info={"seed": dcfg.seed})
    path = _out(args, "distilled.smrg", cfg)
    ck.save(student, path)
    print(path)
    return 0


def cmd_eval(args) -> int:
    model = ck.load(args.ckpt)
    accs = {Path(p).stem: evaluate(model, ck.load_dataset(p)) for p in args.test}
    payload = {"accuracy": accs, "avg_acc": float(np.mean(list(accs.values())))}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        _out(args, "eval.json").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    out = _workdir(args, cfg)
    if args.hetero:
        report = run_hetero_experiment(cfg.suite, cfg.sml, cfg.stats, cfg.distill)
        stem = "hetero_report"
    else:
        report = run_experiment(cfg.suite, cfg.methods, cfg.sml, cfg.stats)
        stem = "report"
    payload = report.to_dict()
    payload["seed"] = cfg.suite.seed
    _write_json(out / f"{stem}.json", payload)
    (out / f"{stem}.txt").write_text(report.to_text())
    _write_json(out / f"{stem}.timings.json", report.timings)
    for name, table in report.coefficients.items():
        slug = name.lower().replace(" ", "_").replace("+", "p")
        values = np.array(table["values"])
        _heatmap_with_seed(CoefficientTable(table["mode"], values), out / f"{stem}.{slug}.csv", cfg.suite.seed)
    sys.stdout.write(report.to_text())
    return 0


def cmd_heatmap(args) -> int:
    params, stats_cfg, mode = load_sml(args.sml)
    table = predict_coefficients(params, [ck.load(p) for p in args.ckpt], stats_cfg, mode)
    path = _out(args, "heatmap.csv")
    _heatmap_with_seed(table, path, args.seed)
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    defaults = json.dumps(CliConfig().to_dict(), indent=2, sort_keys=True)
    parser = argparse.ArgumentParser(
        prog="statsmerging",
        description="Statistics-guided model merging toolkit.",
        epilog="Default configuration (every --config key, with its default):\n" + defaults,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--workdir", help="directory receiving all outputs (default: config paths.workdir or .)")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--out", help="output file name, relative to --workdir")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate the synthetic task suite")
    p.add_argument("--config")

    p = add("finetune", cmd_finetune, "fine-tune a base (or pretrain one with --arch)")
    p.add_argument("--train", required=True)
    p.add_argument("--base")
    p.add_argument("--arch", help="comma-separated layer widths, e.g. 16,64,64,16")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--task-id")

    p = add("stats", cmd_stats, "per-layer weight statistics as CSV")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--rank", type=int, default=3)

    p = add("pseudo", cmd_pseudo, "label validation inputs with task-specific teachers")
    p.add_argument("--ckpt", nargs="+", required=True, help="one teacher per task")
    p.add_argument("--val", nargs="+", required=True, help="one validation dataset per task (inputs only are read)")
    p.add_argument("--fraction", type=float, default=0.2)

    p = add("train-sml", cmd_train_sml, "train the coefficient learner")
    p.add_argument("--config")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--mode", choices=("task_wise", "layer_wise"), default="layer_wise")
    p.add_argument("--label-mode", choices=("kd_hard", "kd_soft"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--rank", type=int)

    p = add("merge", cmd_merge, "merge checkpoints")
    p.add_argument("--method", choices=("stats", "weight_avg", "task_arithmetic", "ties"), required=True)
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--base")
    p.add_argument("--coeffs", help="coefficient CSV (task,layer,lambda)")
    p.add_argument("--scaling", type=float)
    p.add_argument("--keep-fraction", type=float, default=0.2)
    p.add_argument("--delta", action="store_true", help="stats merge on task vectors over --base")

    p = add("distill", cmd_distill, "distill a teacher into the target architecture")
    p.add_argument("--config")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student-init", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--epochs", type=int)

    p = add("eval", cmd_eval, "accuracy of a checkpoint on test sets")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", nargs="+", required=True)

    p = add("experiment", cmd_experiment, "run the full benchmark pipeline")
    p.add_argument("--config")
    p.add_argument("--hetero", action="store_true", help="run the cross-architecture pipeline")

    p = add("heatmap", cmd_heatmap, "export learner coefficients as CSV")
    p.add_argument("--sml", required=True)
    p.add_argument("--ckpt", nargs="+", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except StatsMergingError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

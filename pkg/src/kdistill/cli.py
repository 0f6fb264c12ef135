"""Command-line interface.

Configuration is resolved as built-in defaults < ``--config`` file <
``KDISTILL_*`` environment variables < command-line flags. Environment
variables address nested keys with double underscores, for example
``KDISTILL_TRAINING__OPTIMIZER__LEARNING_RATE=0.01`` or
``KDISTILL_RUN_DIR=runs/x``; values are parsed as YAML scalars.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import shutil
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .checkpoint import CheckpointError, load_checkpoint
from .data import SplitSpec, load_dataset, make_fixture, split_dataset
from .explain import grad_cam, save_cam
from .metrics import MetricsReport, evaluate
from .models import BackboneNotFoundError, BackboneSpec, PretrainedUnavailableError, backbone_spec, build_backbone
from .training import (
    METHODS,
    SSL_METHODS,
    SWEEP_METHODS,
    ConfigError,
    DistillConfig,
    DivergenceError,
    distill_student,
    model_from_checkpoint,
    pretrain_teacher,
)

log = logging.getLogger("kdistill")

ENV_PREFIX = "KDISTILL_"
METRIC_KEYS = ("acc", "bacc", "auc_macro", "map_macro")


class CLIError(Exception):
    pass


# -- configuration ---------------------------------------------------------------

def default_config(toy: bool = False) -> dict:
    """The full layered document with every default filled in."""
    if toy:
        training = DistillConfig.toy().to_dict()
        teacher = {"name": "tiny-teacher", "input_size": None, "pretrained_source": None, "projection_dim": 32}
        student = {"name": "tiny-student", "input_size": None, "pretrained_source": None, "projection_dim": 32}
    else:
        training = DistillConfig().to_dict()
        teacher = {"name": "resnet50", "input_size": None, "pretrained_source": "imagenet", "projection_dim": 128}
        student = {"name": "mobilenet_v2", "input_size": None, "pretrained_source": "imagenet", "projection_dim": 128}
    split = SplitSpec()
    return {
        "dataset": {"root": None, "manifest": None},
        "split": {"test_fraction": split.test_fraction, "train_val_ratio": list(split.train_val_ratio),
                  "seed": split.seed},
        "teacher": teacher,
        "student": student,
        "training": training,
        "run_dir": "runs",
        "seeds": [0],
    }


def _merge(base: dict, update: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown configuration key {path!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, path)
        elif isinstance(out[key], dict):
            raise ConfigError(f"configuration key {path!r} must be a mapping")
        else:
            out[key] = value
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    nested: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw) if raw != "" else None
    return nested


def resolve_config(path: Optional[str], toy: bool, flags: dict, environ=None) -> dict:
    cfg = default_config(toy)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, loaded)
    cfg = _merge(cfg, env_overrides(environ))
    return _merge(cfg, {k: v for k, v in flags.items() if v is not None})


def _backbone(section: dict, class_count: int) -> BackboneSpec:
    size = section.get("input_size")
    return backbone_spec(
        section["name"], class_count,
        input_size=tuple(size) if size is not None else None,
        pretrained_source=section.get("pretrained_source"),
        projection_dim=int(section.get("projection_dim", 128)),
    )


def _available(spec: BackboneSpec) -> BackboneSpec:
    """Fall back to random initialisation when pretrained weights cannot be loaded."""
    if spec.pretrained_source is None:
        return spec
    try:
        build_backbone(spec)
    except PretrainedUnavailableError as exc:
        warnings.warn(f"{exc}; using random initialisation", RuntimeWarning)
        return BackboneSpec(**{**spec.to_dict(), "pretrained_source": None})
    return spec


def _training(cfg: dict, method: Optional[str] = None, seed: Optional[int] = None) -> DistillConfig:
    d = copy.deepcopy(cfg["training"])
    if method is not None:
        d["method"] = method
    if seed is not None:
        d["seed"] = seed
    return DistillConfig.from_dict(d)


def _splits(cfg: dict):
    root = cfg["dataset"]["root"]
    if root is None:
        raise ConfigError("dataset.root is not set (use --data, the config file or KDISTILL_DATASET__ROOT)")
    ds = load_dataset(root, cfg["dataset"]["manifest"])
    s = cfg["split"]
    spec = SplitSpec(test_fraction=s["test_fraction"], train_val_ratio=tuple(s["train_val_ratio"]), seed=s["seed"])
    return ds, split_dataset(ds, spec)


def _prepare_run_dir(path: Path, force: bool, resume: bool = False) -> Path:
    if resume:
        if not (path / "last.ckpt").exists():
            raise CLIError(f"cannot resume: {path} has no last.ckpt")
        return path
    if path.exists() and any(path.iterdir()):
        if not force:
            raise CLIError(f"run directory {path} exists and is not empty; pass --force to overwrite")
        if not ((path / "config.snapshot").exists() or (path / "summary.json").exists()):
            raise CLIError(f"refusing to overwrite {path}: it does not look like a run directory")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- commands ------------------------------------------------------------------

def _flags(args) -> dict:
    flags: Dict[str, dict] = {}
    if getattr(args, "data", None):
        flags["dataset"] = {"root": args.data}
    if getattr(args, "run_dir", None):
        flags["run_dir"] = args.run_dir
    training = {}
    if getattr(args, "method", None):
        training["method"] = args.method
    if getattr(args, "seed", None) is not None:
        training["seed"] = args.seed
    if getattr(args, "max_epochs", None) is not None:
        training["max_epochs"] = args.max_epochs
    if training:
        flags["training"] = training
    if getattr(args, "seeds", None):
        flags["seeds"] = [int(s) for s in args.seeds.split(",")]
    return flags


def _config(args) -> dict:
    return resolve_config(args.config, args.toy, _flags(args))


def _check_method(method: str) -> None:
    if method not in METHODS:
        raise CLIError(f"unknown method {method!r}; valid methods: {', '.join(SWEEP_METHODS)}")


def _write_report(ckpt, test, path: Path) -> MetricsReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = evaluate(model_from_checkpoint(ckpt), test)
    report.save(path)
    return report


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    _check_method(cfg["training"]["method"])
    config = _training(cfg)
    ds, (train, val, test) = _splits(cfg)
    run = _prepare_run_dir(Path(cfg["run_dir"]), args.force, args.resume)
    spec = _available(_backbone(cfg["teacher"], ds.num_classes))
    ckpt = pretrain_teacher(config, spec, train, val, run_dir=run, resume=args.resume, snapshot={"config": cfg})
    _write_report(ckpt, test, run / "report.json")
    print(run)
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    method = cfg["training"]["method"]
    _check_method(method)
    config = _training(cfg)
    if method != "WCE-only" and not args.teacher:
        raise CLIError(f"method {method} needs --teacher")
    ds, (train, val, test) = _splits(cfg)
    run = _prepare_run_dir(Path(cfg["run_dir"]), args.force, args.resume)
    spec = _available(_backbone(cfg["student"], ds.num_classes))
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    ckpt = distill_student(config, teacher, spec, train, val, run_dir=run, resume=args.resume,
                           snapshot={"config": cfg})
    report = _write_report(ckpt, test, run / "report.json")
    print(json.dumps({"run_dir": str(run), **{k: getattr(report, k) for k in METRIC_KEYS}}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds, (train, val, test) = _splits(cfg)
    part = {"train": train, "val": val, "test": test, "all": ds}[args.split]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = evaluate(model_from_checkpoint(args.checkpoint), part)
    if args.out:
        report.save(args.out)
    print(report.to_json())
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = [MetricsReport.load(p) for p in args.reports]
    labels = args.labels.split(",") if args.labels else [Path(p).parent.name or Path(p).stem for p in args.reports]
    if len(labels) != len(reports):
        raise CLIError("--labels must name every report")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(reports)

    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 4), squeeze=False)
    for ax, r, name in zip(axes[0], reports, labels):
        cm = np.asarray(r.confusion, dtype=float)
        rows = cm.sum(axis=1, keepdims=True)
        norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
        ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
        ticks = range(len(r.class_names))
        ax.set_xticks(ticks, r.class_names, rotation=45, fontsize=7)
        ax.set_yticks(ticks, r.class_names, fontsize=7)
        for (i, j), v in np.ndenumerate(norm):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=6,
                    color="white" if v > 0.5 else "black")
        ax.set_title(name)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(out / "confusion.png", dpi=120)
    plt.close(fig)

    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 4), squeeze=False)
    for ax, r, name in zip(axes[0], reports, labels):
        for k, pts in enumerate(r.roc_points):
            if pts:
                fpr, tpr = zip(*pts)
                ax.plot(fpr, tpr, lw=1, label=f"{r.class_names[k]} ({r.auc[k]:.3f})")
        ax.plot([0, 1], [0, 1], ls="--", c="grey", lw=0.8)
        ax.set_title(f"{name}  macro AUC {r.auc_macro:.3f}")
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=6, loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "roc.png", dpi=120)
    plt.close(fig)
    print(out / "confusion.png")
    print(out / "roc.png")
    return 0


def cmd_cam(args) -> int:
    from PIL import Image
    import torchvision.transforms.functional as TF

    model = model_from_checkpoint(args.checkpoint)
    h, w, c = model.spec.input_size
    with Image.open(args.image) as im:
        im = im.convert("RGB" if c == 3 else "L").resize((w, h), Image.BILINEAR)
        image = TF.pil_to_tensor(im).float().div(255.0)
    cam = grad_cam(model, image, args.class_index)
    paths = save_cam(cam, image, args.out, stem=Path(args.image).stem)
    for p in paths:
        print(p)
    return 0


def _parse_counts(text: str) -> List[int]:
    if "x" in text:
        per, classes = text.split("x")
        return [int(per)] * int(classes)
    return [int(v) for v in text.split(",")]


def cmd_make_fixture(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CLIError(f"{out} exists and is not empty; pass --force to overwrite")
        if not (out / "manifest.csv").exists():
            raise CLIError(f"refusing to overwrite {out}: it does not look like a fixture (no manifest.csv)")
        shutil.rmtree(out)
    ledger = make_fixture(out, _parse_counts(args.counts), size=args.size, seed=args.seed, noise=args.noise)
    print(json.dumps(ledger))
    return 0


def summarize(reports: Dict[str, List[MetricsReport]]) -> dict:
    """Mean and sample standard deviation of every headline metric per method."""
    table = {}
    for method, rs in reports.items():
        row = {}
        for key in METRIC_KEYS:
            values = np.array([getattr(r, key) for r in rs], dtype=float)
            std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
            row[key] = {"mean": float(values.mean()), "std": std, "n": int(len(values))}
        table[method] = row
    return table


def _summary_markdown(table: dict) -> str:
    lines = ["| method | " + " | ".join(METRIC_KEYS) + " |", "|---" * (len(METRIC_KEYS) + 1) + "|"]
    for method, row in table.items():
        cells = [f"{row[k]['mean']:.3f} ± {row[k]['std']:.3f}" for k in METRIC_KEYS]
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    cfg = _config(args)
    methods = args.methods.split(",") if args.methods else list(SWEEP_METHODS)
    for m in methods:
        if m not in SWEEP_METHODS:
            raise CLIError(f"unknown method {m!r}; valid methods: {', '.join(SWEEP_METHODS)}")
    seeds = [int(s) for s in cfg["seeds"]]
    ds, (train, val, test) = _splits(cfg)
    root = _prepare_run_dir(Path(cfg["run_dir"]), args.force)
    with open(root / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"status": "running"}, fh)
    t_spec = _available(_backbone(cfg["teacher"], ds.num_classes))
    s_spec = _available(_backbone(cfg["student"], ds.num_classes))

    teachers: Dict[tuple, object] = {}

    def teacher_for(method: str, seed: int):
        if method == "WCE-only":
            return None
        if args.teacher:
            return load_checkpoint(args.teacher)
        ssl = method in SSL_METHODS
        key = (ssl, seed)
        if key not in teachers:
            kind = "ssl" if ssl else "plain"
            run = root / "teachers" / f"{kind}-seed{seed}"
            run.mkdir(parents=True)
            config = _training(cfg, method="SSD-KD" if ssl else "WCE-only", seed=seed)
            teachers[key] = pretrain_teacher(config, t_spec, train, val, run_dir=run, snapshot={"config": cfg})
            _write_report(teachers[key], test, run / "report.json")
        return teachers[key]

    reports: Dict[str, List[MetricsReport]] = {}
    for method in methods:
        for seed in seeds:
            run = root / method / f"seed{seed}"
            run.mkdir(parents=True)
            config = _training(cfg, method=method, seed=seed)
            ckpt = distill_student(config, teacher_for(method, seed), s_spec, train, val, run_dir=run,
                                   snapshot={"config": cfg})
            report = _write_report(ckpt, test, run / "report.json")
            reports.setdefault(method, []).append(report)
            log.info("%s seed %d  bacc %.3f", method, seed, report.bacc)

    table = summarize(reports)
    with open(root / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"seeds": seeds, "methods": table}, fh, indent=2)
    md = _summary_markdown(table)
    (root / "summary.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return 0


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdistill", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run=True):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--toy", action="store_true", help="toy backbones and toy loss-weight profile")
        p.add_argument("--data", help="dataset root (overrides dataset.root)")
        if run:
            p.add_argument("--run-dir", help="output directory")
            p.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    p = sub.add_parser("train-teacher", help="pretrain the teacher")
    common(p)
    p.add_argument("--method", help="SSL-family methods add the contrastive pretext term")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <run-dir>/last.ckpt")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distil a teacher checkpoint into the student")
    common(p)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--method")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="metrics report for a checkpoint")
    common(p, run=False)
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="confusion-matrix and ROC panels from reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--labels", help="comma-separated panel titles")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("cam", help="Grad-CAM heat map and overlay for one image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--class", dest="class_index", type=int, required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("make-fixture", help="write a synthetic corpus")
    p.add_argument("out")
    p.add_argument("--counts", default="20x8", help="'PERxCLASSES' or comma-separated per-class counts")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("sweep", help="every method x seed, with a mean ± std summary")
    common(p)
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(SWEEP_METHODS)}")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--teacher", help="share one teacher checkpoint instead of training per seed")
    p.add_argument("--max-epochs", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ConfigError, CheckpointError, DivergenceError, BackboneNotFoundError,
            FileNotFoundError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

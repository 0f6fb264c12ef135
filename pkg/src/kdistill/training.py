"""Teacher pretraining and student distillation loops.

SGD with momentum, learning-rate reduction after ``lr_patience``
non-improving epochs, early stopping after ``early_stop_patience``, and a
run directory holding the resolved config, per-epoch history and the best
and last checkpoints. Every random draw is derived from (seed, epoch, ...)
so a run resumed from its last checkpoint continues exactly as an
uninterrupted one would.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import AugmentPolicy, LabeledImageSet, batch_iterator, class_weights, epoch_batches, view_batch
from .losses import (
    LossWeights,
    blkd_loss,
    contrastive_loss,
    crkd_loss,
    drkd_loss,
    sskd_loss,
    weighted_cross_entropy,
)
from .metrics import evaluate
from .models import BackboneSpec, TapNet, attach_adapter, build_backbone

log = logging.getLogger(__name__)

__all__ = [
    "METHODS",
    "SWEEP_METHODS",
    "SSL_METHODS",
    "OptimizerConfig",
    "SSLConfig",
    "DistillConfig",
    "TrainState",
    "ConfigError",
    "DivergenceError",
    "schedule_step",
    "DistillObjective",
    "pretrain_teacher",
    "distill_student",
    "model_checkpoint",
    "model_from_checkpoint",
]

# method -> active loss terms; "wce" is the plain hard-label term used when
# the method carries no logit distillation of its own
METHODS: Dict[str, Tuple[str, ...]] = {
    "WCE-only": ("wce",),
    "BLKD": ("blkd",),
    "DRKD": ("wce", "drkd"),
    "CRKD": ("wce", "crkd"),
    "SSKD": ("blkd", "sskd"),
    "BLKD+DRKD": ("blkd", "drkd"),
    "BLKD+CRKD": ("blkd", "crkd"),
    "SSKD+DRKD": ("blkd", "drkd", "sskd"),
    "SSKD+CRKD": ("blkd", "crkd", "sskd"),
    "D-KD": ("blkd", "drkd", "crkd"),
    "SSD-KD": ("blkd", "drkd", "crkd", "sskd"),
}
SWEEP_METHODS = (
    "WCE-only", "BLKD", "DRKD", "SSKD", "BLKD+DRKD", "BLKD+CRKD",
    "SSKD+DRKD", "SSKD+CRKD", "D-KD", "SSD-KD",
)
SSL_METHODS = frozenset(m for m, terms in METHODS.items() if "sskd" in terms)

# Gram magnitudes of the 16-channel toy teacher are far from ResNet50's, so
# the channel term is reweighted for toy runs.
TOY_LAMBDA_CRKD = 1.0
# at full weight the contrastive term can pin the toy teacher to the hue-only solution
TOY_CONTRASTIVE_WEIGHT = 0.1


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001


@dataclass
class SSLConfig:
    views: int = 4
    projection_dim: int = 128
    tau: float = 0.5
    contrastive_weight: float = 1.0


@dataclass
class DistillConfig:
    method: str = "SSD-KD"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    max_epochs: int = 150
    lr_patience: int = 10
    lr_factor: float = 0.1
    early_stop_patience: int = 15
    batch_size: int = 128
    eval_batch_size: int = 128
    improve_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.optimizer.learning_rate <= 0 or self.optimizer.momentum < 0 or self.optimizer.weight_decay < 0:
            raise ConfigError("learning rate must be positive, momentum and weight decay nonnegative")
        if not 0 < self.lr_factor < 1:
            raise ConfigError(f"lr_factor must lie in (0, 1), got {self.lr_factor}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (relational losses need pairs)")
        if self.ssl.views < 2 or self.ssl.tau <= 0:
            raise ConfigError("ssl.views must be >= 2 and ssl.tau positive")

    @property
    def terms(self) -> Tuple[str, ...]:
        return METHODS[self.method]

    @classmethod
    def toy(cls, **overrides) -> "DistillConfig":
        """Desk-scale profile: small batches, larger step size, toy channel weight."""
        lw = LossWeights(lambda_crkd=TOY_LAMBDA_CRKD)
        base = dict(
            loss_weights=lw,
            optimizer=OptimizerConfig(learning_rate=0.02),
            ssl=SSLConfig(projection_dim=32, contrastive_weight=TOY_CONTRASTIVE_WEIGHT),
            # photometric jitter and rescaling stall 30-epoch runs of the toy nets
            augment=AugmentPolicy(brightness=0, contrast=0, saturation=0, scale=(1.0, 1.0)),
            max_epochs=30,
            batch_size=16,
            eval_batch_size=64,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["scale"] = list(self.augment.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        nested = {
            "loss_weights": LossWeights,
            "optimizer": OptimizerConfig,
            "ssl": SSLConfig,
            "augment": AugmentPolicy,
        }
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                _reject_unknown(d[key], typ, key)
                d[key] = typ(**d[key])
        _reject_unknown(d, cls, "training")
        return cls(**d)


def _reject_unknown(d: dict, typ, where: str) -> None:
    known = {f.name for f in fields(typ)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


# -- schedule -------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0
    lr_current: float = 0.001
    history: List[dict] = field(default_factory=list)


def schedule_step(state: TrainState, val_loss: float, config: DistillConfig) -> Tuple[TrainState, str]:
    """Advance the plateau schedule by one epoch.

    Returns the new state and one of ``"continue"``, ``"reduce_lr"`` or
    ``"stop"``. The input state is not modified.
    """
    if not math.isfinite(val_loss):
        raise DivergenceError(f"validation loss is not finite ({val_loss}) at epoch {state.epoch + 1}")
    epoch = state.epoch + 1
    if val_loss < state.best_val_loss - config.improve_tol:
        return replace(state, epoch=epoch, best_val_loss=val_loss, epochs_since_improve=0), "continue"
    since = state.epochs_since_improve + 1
    if since >= config.early_stop_patience:
        return replace(state, epoch=epoch, epochs_since_improve=since), "stop"
    if since % config.lr_patience == 0:
        lr = state.lr_current * config.lr_factor
        return replace(state, epoch=epoch, epochs_since_improve=since, lr_current=lr), "reduce_lr"
    return replace(state, epoch=epoch, epochs_since_improve=since), "continue"


# -- objective ------------------------------------------------------------------

class DistillObjective:
    """Assembles the configured composite loss from teacher and student taps.

    Term weights: ``wce`` 1, ``blkd`` lambda_blkd, ``drkd`` lambda_drkd,
    ``crkd`` lambda_crkd, ``sskd`` lambda_sskd. For the teacher's own
    pretraining, ``contrastive`` (weight ``ssl.contrastive_weight``) may
    replace the distillation terms.
    """

    def __init__(self, terms, lw: LossWeights, ssl: SSLConfig, weights: torch.Tensor):
        self.terms = tuple(terms)
        self.lw = lw
        self.ssl = ssl
        self.weights = weights
        self.term_weights = {
            "wce": 1.0,
            "blkd": lw.lambda_blkd,
            "drkd": lw.lambda_drkd,
            "crkd": lw.lambda_crkd,
            "sskd": lw.lambda_sskd,
            "contrastive": ssl.contrastive_weight,
        }

    @property
    def needs_teacher(self) -> bool:
        return any(t in self.terms for t in ("blkd", "drkd", "crkd", "sskd"))

    @property
    def needs_views(self) -> bool:
        return "sskd" in self.terms or "contrastive" in self.terms

    def __call__(self, student: TapNet, images, labels, teacher: Optional[TapNet] = None, views=None):
        """Return ``(total, components)`` for one batch; components are detached floats."""
        s = student.taps(images)
        t = None
        if self.needs_teacher:
            with torch.no_grad():
                t = teacher.taps(images)
        parts = {}
        for term in self.terms:
            if term == "wce":
                parts[term] = weighted_cross_entropy(s.logits, labels, self.weights)
            elif term == "blkd":
                parts[term] = blkd_loss(t.logits, s.logits, labels, self.weights, self.lw)
            elif term == "drkd":
                parts[term] = drkd_loss(t.embedding, s.embedding, self.lw)
            elif term == "crkd":
                adapted = student.adapter(s.features, tuple(t.features.shape[-2:]))
                parts[term] = crkd_loss(t.features, adapted)
            elif term == "sskd":
                with torch.no_grad():
                    t_proj = teacher.head(teacher.taps(views).embedding)
                s_proj = student.head(student.taps(views).embedding)
                parts[term] = sskd_loss(t_proj, s_proj, self.ssl.views, self.ssl.tau)
            elif term == "contrastive":
                proj = student.head(student.taps(views).embedding)
                parts[term] = contrastive_loss(proj, self.ssl.views, self.ssl.tau)
            else:
                raise ConfigError(f"unknown loss term {term!r}")
        total = sum(self.term_weights[k] * v for k, v in parts.items())
        components = {k: float(v.detach()) for k, v in parts.items()}
        for k, v in components.items():
            if not math.isfinite(v):
                raise DivergenceError(f"loss component {k!r} became non-finite ({v})")
        return total, components


# -- checkpoints ------------------------------------------------------------------

def model_checkpoint(model: TapNet, **kwargs) -> Checkpoint:
    extras = dict(kwargs.pop("extras", {}))
    if model.adapter is not None:
        extras["adapter_out"] = model.adapter.out_channels
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(spec=model.spec, state=state, extras=extras, **kwargs)


def model_from_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> TapNet:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = build_backbone(ckpt.spec, seed=0)
    if "adapter_out" in ckpt.extras:
        attach_adapter(model, int(ckpt.extras["adapter_out"]))
    model.load_state_dict(ckpt.state)
    return model


def _freeze(model: TapNet) -> TapNet:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# -- loops ------------------------------------------------------------------------

class _RunDir:
    def __init__(self, path: Optional[Path], snapshot: Optional[dict], resume: bool):
        self.path = Path(path) if path is not None else None
        if self.path is None:
            return
        self.path.mkdir(parents=True, exist_ok=True)
        if not resume:
            with open(self.path / "config.snapshot", "w", encoding="utf-8") as fh:
                json.dump(snapshot, fh, indent=2, sort_keys=True)
            (self.path / "history.jsonl").write_text("", encoding="utf-8")

    def append(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path / "history.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def save(self, name: str, ckpt: Checkpoint) -> None:
        if self.path is not None:
            save_checkpoint(ckpt, self.path / name)


def _val_loss(objective, model, teacher, val: LabeledImageSet, config: DistillConfig) -> float:
    h, w, _ = model.spec.input_size
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for b, (images, labels) in enumerate(
            batch_iterator(val, config.eval_batch_size, config.seed, size=(h, w), shuffle=False)
        ):
            if len(labels) < 2:
                continue
            views = None
            if objective.needs_views:
                start = b * config.eval_batch_size
                idx = range(start, start + len(labels))
                # fixed epoch index: validation views are the same every epoch
                views = view_batch(val, idx, config.ssl.views, config.augment, config.seed, -1, (h, w))
            loss, _ = objective(model, images, labels, teacher, views)
            total += float(loss) * len(labels)
            n += len(labels)
    model.train()
    if n == 0:
        raise ConfigError("validation split too small")
    return total / n


def _fit(
    config: DistillConfig,
    model: TapNet,
    objective: DistillObjective,
    train: LabeledImageSet,
    val: LabeledImageSet,
    teacher: Optional[TapNet],
    run_dir,
    snapshot: dict,
    resume: bool,
    extras: dict,
) -> Checkpoint:
    h, w, _ = model.spec.input_size
    if config.batch_size > len(train):
        raise ConfigError(f"batch_size {config.batch_size} exceeds training split size {len(train)}")
    opt_cfg = config.optimizer
    optimizer = torch.optim.SGD(
        model.parameters(), lr=opt_cfg.learning_rate, momentum=opt_cfg.momentum, weight_decay=opt_cfg.weight_decay
    )
    out = _RunDir(run_dir, snapshot, resume)
    dtype = next(model.parameters()).dtype

    if resume:
        last = load_checkpoint(out.path / "last.ckpt")
        best = load_checkpoint(out.path / "best.ckpt")
        model.load_state_dict(last.state)
        optimizer.load_state_dict(last.optimizer)
        if last.rng_state is not None:
            torch.set_rng_state(last.rng_state)
        ts = last.train_state
        state = TrainState(
            epoch=last.epoch,
            best_val_loss=float(last.best_val_loss),
            epochs_since_improve=int(ts["epochs_since_improve"]),
            lr_current=float(ts["lr_current"]),
        )
        with open(out.path / "history.jsonl", encoding="utf-8") as fh:
            state.history = [json.loads(line) for line in fh if line.strip()]
        if ts.get("stopped"):
            return best
    else:
        model.train()
        val0 = _val_loss(objective, model, teacher, val, config)
        state = TrainState(epoch=0, best_val_loss=val0, lr_current=opt_cfg.learning_rate)
        best = model_checkpoint(model, epoch=0, best_val_loss=val0, extras=extras,
                                train_state={"initial_val_loss": val0})
        out.save("best.ckpt", best)

    stopped = False
    while state.epoch < config.max_epochs and not stopped:
        epoch = state.epoch + 1
        model.train()
        sums: Dict[str, float] = {}
        steps = 0
        for idx in epoch_batches(len(train), config.batch_size, config.seed, epoch):
            if len(idx) < 2:
                continue  # a singleton remainder has no relations and breaks batch norm
            images = torch.stack([
                _augment_item(train, int(i), config, epoch, (h, w)) for i in idx
            ]).to(dtype)
            labels = torch.from_numpy(train.labels[idx])
            views = None
            if objective.needs_views:
                views = view_batch(train, idx, config.ssl.views, config.augment, config.seed, epoch, (h, w)).to(dtype)
            loss, parts = objective(model, images, labels, teacher, views)
            if not torch.isfinite(loss):
                raise DivergenceError(f"total loss became non-finite at epoch {epoch}: {parts}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + float(loss.detach())
            steps += 1

        val_loss = _val_loss(objective, model, teacher, val, config)
        with warnings.catch_warnings():
            # small validation splits routinely miss a class; the report records it
            warnings.simplefilter("ignore", RuntimeWarning)
            report = evaluate(model, val, config.eval_batch_size)
        prev_best = state.best_val_loss
        state, action = schedule_step(state, val_loss, config)
        if action == "reduce_lr":
            for group in optimizer.param_groups:
                group["lr"] = state.lr_current
        stopped = action == "stop"

        record = {
            "epoch": epoch,
            "lr": state.lr_current,
            "train": {k: v / max(steps, 1) for k, v in sums.items()},
            "val_loss": val_loss,
            "val": {"acc": report.acc, "bacc": report.bacc, "auc": report.auc_macro, "map": report.map_macro},
            "best_val_loss": state.best_val_loss,
            "action": action,
        }
        state.history.append(record)
        out.append(record)
        log.info("epoch %d  train %.4f  val %.4f  bacc %.3f  %s", epoch, record["train"].get("total", 0.0),
                 val_loss, report.bacc, action)

        if state.best_val_loss < prev_best:
            best = model_checkpoint(model, epoch=epoch, best_val_loss=state.best_val_loss, extras=extras)
            out.save("best.ckpt", best)
        last = model_checkpoint(
            model,
            epoch=epoch,
            best_val_loss=state.best_val_loss,
            optimizer=copy.deepcopy(optimizer.state_dict()),
            train_state={"epochs_since_improve": state.epochs_since_improve,
                         "lr_current": state.lr_current, "stopped": stopped},
            rng_state=torch.get_rng_state(),
            extras=extras,
        )
        out.save("last.ckpt", last)

    return best


def _augment_item(ds: LabeledImageSet, i: int, config: DistillConfig, epoch: int, size) -> torch.Tensor:
    from .data import _derive_seed, augment

    return augment(ds.image(i, size), config.augment, _derive_seed(config.seed, epoch, i, 0))


def _snapshot(config: DistillConfig, role: str, specs: dict, extra: Optional[dict]) -> dict:
    snap = {"role": role, "training": config.to_dict(), **{k: v.to_dict() for k, v in specs.items()}}
    if extra:
        snap.update(extra)
    return snap


def pretrain_teacher(
    config: DistillConfig,
    spec: BackboneSpec,
    train: LabeledImageSet,
    val: LabeledImageSet,
    run_dir=None,
    resume: bool = False,
    snapshot: Optional[dict] = None,
) -> Checkpoint:
    """Train a model on its own labels; returns the best-validation checkpoint.

    For self-supervised methods the objective adds the multi-view contrastive
    term on the projection head; otherwise it is the weighted cross-entropy.
    """
    if spec.class_count != train.num_classes:
        raise ConfigError(f"spec has {spec.class_count} classes, dataset has {train.num_classes}")
    terms = ("wce", "contrastive") if config.method in SSL_METHODS else ("wce",)
    weights = class_weights(train)
    model = build_backbone(spec, seed=config.seed)
    objective = DistillObjective(terms, config.loss_weights, config.ssl, weights.float())
    snap = _snapshot(config, "teacher", {"backbone": spec}, snapshot)
    return _fit(config, model, objective, train, val, None, run_dir, snap, resume, {"role": "teacher"})


def distill_student(
    config: DistillConfig,
    teacher: Union[Checkpoint, str, Path, None],
    spec: BackboneSpec,
    train: LabeledImageSet,
    val: LabeledImageSet,
    run_dir=None,
    resume: bool = False,
    student_init: Optional[Checkpoint] = None,
    snapshot: Optional[dict] = None,
) -> Checkpoint:
    """Distil ``teacher`` into a fresh ``spec`` student with ``config.method``.

    The teacher is frozen (eval mode, no gradients) for the whole run and is
    never evaluated for ``WCE-only``. The channel adapter and projection head
    train together with the student.
    """
    if spec.class_count != train.num_classes:
        raise ConfigError(f"spec has {spec.class_count} classes, dataset has {train.num_classes}")
    terms = config.terms
    for term in terms:
        if term != "wce" and {"blkd": config.loss_weights.lambda_blkd, "drkd": config.loss_weights.lambda_drkd,
                              "crkd": config.loss_weights.lambda_crkd, "sskd": config.loss_weights.lambda_sskd}[term] <= 0:
            raise ConfigError(f"method {config.method} uses {term.upper()} but its weight is 0")
    if "drkd" in terms and config.batch_size < 3:
        warnings.warn("batch_size < 3: angle-wise relation term disabled", RuntimeWarning)

    weights = class_weights(train).float()
    objective = DistillObjective(terms, config.loss_weights, config.ssl, weights)

    teacher_model = None
    if objective.needs_teacher:
        if teacher is None:
            raise ConfigError(f"method {config.method} needs a teacher checkpoint")
        teacher_model = _freeze(model_from_checkpoint(teacher))
        if teacher_model.spec.class_count != spec.class_count:
            raise ConfigError("teacher and student disagree on the class count")
        if teacher_model.spec.input_size != spec.input_size:
            raise ConfigError("teacher and student disagree on the input size")
        if "sskd" in terms and teacher_model.spec.projection_dim != spec.projection_dim:
            raise ConfigError("teacher and student projection heads differ in width")

    if student_init is not None:
        student = model_from_checkpoint(student_init)
    else:
        student = build_backbone(spec, seed=config.seed)
    if "crkd" in terms and student.adapter is None:
        attach_adapter(student, teacher_model.spec.last_conv_channels, seed=config.seed + 1)
    if "crkd" in terms and student.adapter.out_channels != teacher_model.spec.last_conv_channels:
        raise ConfigError("channel adapter output does not match the teacher's channel count")

    specs = {"student": spec}
    if teacher_model is not None:
        specs["teacher"] = teacher_model.spec
    snap = _snapshot(config, "student", specs, snapshot)
    return _fit(config, student, objective, train, val, teacher_model, run_dir, snap, resume, {"role": "student"})

"""Training loop: seeded shuffling, flips, smoothed CE, Adam, warmup + cosine.

Also hard distillation of a mini-DeiT student from a frozen CNN teacher.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .backbones import BackboneConfig
from .data import PairArrays, flip_batch
from .metrics import macro_f1, subset_f1, top1
from .model import Classifier, RveRNetModel, build_classifier
from .tensor import (ConfigurationError, DimensionError, Tensor,
                     cross_entropy)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Numeric failure during training (e.g. a NaN loss)."""


@dataclass
class DistillConfig:
    teacher_checkpoint: str | None = None
    weight: float = 0.5

    def validate(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigurationError(f"distillation weight must lie in [0, 1], got {self.weight}")
        return self


@dataclass
class TrainConfig:
    lr0: float = 4e-3
    batch_size: int = 50
    epochs: int = 30
    warmup_epochs: int = 5
    label_smoothing: float = 0.1
    flip_p: float = 0.5
    seed: int = 0
    distill: DistillConfig | None = None
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be positive, got {self.lr0}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs and warmup_epochs must be non-negative")
        if self.warmup_epochs > self.epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) exceeds epochs ({self.epochs})")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigurationError(f"flip_p must lie in [0, 1], got {self.flip_p}")
        if self.distill is not None:
            self.distill.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        dist = d.pop("distill", None)
        if dist is not None:
            extra = set(dist) - set(DistillConfig.__dataclass_fields__)
            if extra:
                raise ConfigurationError(f"unknown distill keys: {sorted(extra)}")
            dist = DistillConfig(**dist)
        return cls(distill=dist, **d).validate()


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    top1: list = field(default_factory=list)
    macro_f1: list = field(default_factory=list)
    subset_f1: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "top1", "macro_f1", "subset_f1", "lr"])
        for i in range(len(self.epoch)):
            w.writerow([self.epoch[i], fmt(self.loss[i]), fmt(self.top1[i]),
                        fmt(self.macro_f1[i]), fmt(self.subset_f1[i]), fmt(self.lr[i])])
        return buf.getvalue()


# -- schedule and optimizer ---------------------------------------------------
def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear warmup to ``lr0`` then cosine decay towards 0."""
    if warmup_steps >= total_steps:
        raise ConfigurationError(
            f"warmup_steps ({warmup_steps}) must be below total_steps ({total_steps})")
    if not 0 <= step < total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return lr0 * (step + 1) / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_init(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(_arr(v)) for k, v in params.items()},
            "v": {k: np.zeros_like(_arr(v)) for k, v in params.items()}}


def _arr(v):
    return v.data if isinstance(v, Tensor) else v


def adam_step(params: dict, grads: dict, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``params`` maps names to Tensors or arrays; a missing or ``None`` grad
    counts as zero.  Returns ``state``.
    """
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        x = _arr(p)
        g = grads.get(name)
        m, v = state["m"][name], state["v"][name]
        if m.shape != x.shape or (g is not None and np.shape(g) != x.shape):
            raise DimensionError(f"adam: shape mismatch for {name}")
        if g is None:
            g = np.zeros_like(x)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        x -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- losses -------------------------------------------------------------------
def hard_distillation_loss(student_cls_logits: Tensor, student_dist_logits: Tensor,
                           teacher_logits, targets, epsilon: float = 0.1,
                           lam: float = 0.5) -> Tensor:
    """``(1-lam) CE_eps(cls, y) + lam CE(dist, argmax teacher)``; the teacher gets no gradient."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must lie in [0, 1], got {lam}")
    t = np.asarray(_arr(teacher_logits))
    if t.shape != student_cls_logits.shape or student_dist_logits.shape != student_cls_logits.shape:
        raise DimensionError("student and teacher logits must share shape [N, K]")
    teacher_labels = t.argmax(axis=1)
    return (cross_entropy(student_cls_logits, targets, epsilon) * (1.0 - lam)
            + cross_entropy(student_dist_logits, teacher_labels) * lam)


# -- loop ---------------------------------------------------------------------
def _inputs(model, x1, x2):
    dtype = model.dtype if isinstance(model, RveRNetModel) else model.backbone.dtype
    if isinstance(model, Classifier):
        return ((x1 + x2).astype(dtype, copy=False),)
    a = x1.astype(dtype, copy=False) if model.uses_roi else None
    b = x2.astype(dtype, copy=False) if model.uses_xroi else None
    return (a, b)


def predict(model, data: PairArrays, batch_size: int = 100) -> np.ndarray:
    if isinstance(model, Classifier):
        return model.predict(data.images.astype(model.backbone.dtype, copy=False), batch_size)
    return model.predict(*_inputs(model, data.x1, data.x2), batch_size=batch_size)


def train(model, dataset: PairArrays, cfg: TrainConfig, test: PairArrays | None = None,
          teacher: Classifier | None = None, subset=None, on_epoch=None):
    """Train ``model`` in place and return ``(model, history)``.

    ``teacher`` switches on hard distillation (standalone mini-DeiT only)
    with weight ``cfg.distill.weight``.  ``on_epoch(epoch, model)`` is an
    optional hook, e.g. for periodic checkpoints.
    """
    cfg.validate()
    hist = TrainHistory()
    if cfg.epochs == 0:
        return model, hist
    n = len(dataset)
    if n == 0:
        raise ConfigurationError("training set is empty")
    distill = teacher is not None
    if distill:
        if not (isinstance(model, Classifier) and model.has_dist_head):
            raise ConfigurationError(
                "hard distillation needs a standalone mini_deit classifier with a distillation head")
        lam = cfg.distill.weight if cfg.distill is not None else 0.5
    params = model.parameters()
    state = adam_init(params)
    spe = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * spe
    warmup = cfg.warmup_epochs * spe
    order_rng = np.random.default_rng([cfg.seed, 0])
    flip_rng = np.random.default_rng([cfg.seed, 1])
    k = model.num_classes
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        loss_sum = 0.0
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x1, x2 = flip_batch(dataset.x1[idx], dataset.x2[idx], cfg.flip_p, flip_rng)
            y = dataset.labels[idx]
            lr = lr_schedule(step, total, warmup, cfg.lr0)
            hist.lr_trace.append(lr)
            inputs = _inputs(model, x1, x2)
            if distill:
                cls_l, dist_l = model.head_outputs(inputs[0])
                t_logits = teacher.logits(inputs[0].astype(teacher.backbone.dtype, copy=False))
                loss = hard_distillation_loss(cls_l, dist_l, t_logits.data, y,
                                              cfg.label_smoothing, lam)
            elif isinstance(model, Classifier):
                loss = cross_entropy(model.head_outputs(inputs[0])[0], y, cfg.label_smoothing)
            else:
                loss = cross_entropy(model.logits(*inputs), y, cfg.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b} "
                    f"(step {step}, first sample index {int(idx[0])})")
            loss.backward()
            adam_step(params, {name: p.grad for name, p in params.items()}, state, lr)
            # a relu can mask nan features, so the loss alone is not enough
            bad = next((n for n, p in params.items() if not np.isfinite(p.data).all()), None)
            if bad is not None:
                raise TrainingError(
                    f"non-finite parameter {bad} after epoch {epoch}, batch {b} "
                    f"(step {step}, first sample index {int(idx[0])})")
            for p in params.values():
                p.zero_grad()
            if distill:
                for p in teacher.parameters().values():
                    p.zero_grad()
            loss_sum += value * len(idx)
            step += 1
        hist.epoch.append(epoch + 1)
        hist.loss.append(loss_sum / n)
        hist.lr.append(lr)
        if test is not None and len(test):
            pred = predict(model, test)
            hist.top1.append(top1(pred, test.labels))
            hist.macro_f1.append(macro_f1(pred, test.labels, k))
            hist.subset_f1.append(subset_f1(pred, test.labels, subset, k) if subset else None)
        else:
            hist.top1.append(None)
            hist.macro_f1.append(None)
            hist.subset_f1.append(None)
        log.info("epoch %d loss %.4f top1 %s", epoch + 1, hist.loss[-1], hist.top1[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return model, hist


def train_teacher_then_distill(teacher_cfg: BackboneConfig, student_cfg: BackboneConfig,
                               dataset: PairArrays, cfg: TrainConfig, num_classes: int,
                               test: PairArrays | None = None, dtype=np.float32,
                               teacher: Classifier | None = None):
    """Train a CNN teacher (unless given), freeze it, distill into a mini-DeiT.

    Returns ``(student, teacher, student_history)``; the student is tagged
    ``distilled``.
    """
    if teacher_cfg.kind != "mini_cnn":
        raise ConfigurationError(f"teacher must be mini_cnn, got {teacher_cfg.kind}")
    if student_cfg.kind != "mini_deit":
        raise ConfigurationError(f"student must be mini_deit, got {student_cfg.kind}")
    cfg.validate()
    if teacher is None:
        teacher = build_classifier(teacher_cfg, num_classes, seed=cfg.seed + 1000, dtype=dtype)
        plain = TrainConfig(**{**cfg.to_dict(), "distill": None})
        train(teacher, dataset, plain)
    check = test if test is not None and len(test) else dataset
    acc = top1(predict(teacher, check), check.labels)
    if acc <= 100.0 / num_classes:
        warnings.warn(f"teacher top-1 {acc:.1f}% is not above chance; distilling anyway",
                      RuntimeWarning, stacklevel=2)
    student = build_classifier(student_cfg, num_classes, seed=cfg.seed, dtype=dtype)
    _, hist = train(student, dataset, cfg, test=test, teacher=teacher)
    student.distilled = True
    return student, teacher, hist

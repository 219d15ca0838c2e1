"""Loss, metrics, optimizers and the toy training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE, Sample
from .errors import ConfigError, ContractError, TrainingDivergence
from .mfad import SegPrediction
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

CE_EPS = 1e-12


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    lr: float = 6e-5
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    seed: int = 0
    holdout: float = 0.2

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps", "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be positive")
        if not self.lr >= 0:
            raise ConfigError("lr", "must be nonnegative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be nonnegative")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError("optimizer", "must be 'adamw' or 'sgd'")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout", "must lie in [0, 1)")


@dataclass
class MetricReport:
    iou: np.ndarray  # per class; nan where the class is absent from prediction and truth
    miou: float
    acc: np.ndarray  # per class; nan where the class is absent from truth
    macc: float
    confusion: np.ndarray
    loss_curve: list[float] = field(default_factory=list)

    def summary(self) -> str:
        ious = " ".join("  -  " if math.isnan(v) else f"{v:.3f}" for v in self.iou)
        return f"mIoU {self.miou:.4f}  mAcc {self.macc:.4f}  IoU [{ious}]"


def cross_entropy(pred: SegPrediction | Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log p[true class] over non-ignored pixels (p clamped at 1e-12)."""
    probs = pred.probs if isinstance(pred, SegPrediction) else pred
    k, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ContractError(f"cross_entropy: labels {labels.shape} vs prediction {probs.shape}")
    flat = labels.reshape(-1)
    valid = np.flatnonzero(flat != IGNORE)
    if valid.size == 0:
        raise ContractError("cross_entropy: every pixel is ignored")
    if flat[valid].max() >= k or flat[valid].min() < 0:
        raise ContractError(f"cross_entropy: label outside [0, {k})")
    picked = T.gather_rows(T.reshape(probs, (k * h * w, 1)), flat[valid] * (h * w) + valid)
    return T.mean(T.scale(T.log(T.clamp_min(picked, CE_EPS)), -1.0))


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """k×k counts, rows = truth, columns = prediction; ignore pixels dropped."""
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    keep = labels != IGNORE
    return np.bincount(labels[keep] * k + pred[keep], minlength=k * k).reshape(k, k)


def report_from_confusion(cm: np.ndarray, loss_curve=None) -> MetricReport:
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    macc = float(np.nanmean(acc)) if np.any(tp + fn > 0) else float("nan")
    return MetricReport(iou, miou, acc, macc, cm, list(loss_curve or []))


def eval_miou(preds: Sequence, labels: Sequence[np.ndarray], k: int) -> MetricReport:
    """Dataset-level IoU: confusion counts are pooled over every image first."""
    cm = np.zeros((k, k), dtype=np.int64)
    for p, lab in zip(preds, labels, strict=True):
        if isinstance(p, SegPrediction):
            p = p.labels()
        lab = np.asarray(lab)
        bad = (lab != IGNORE) & ((lab < 0) | (lab >= k))
        if np.any(bad):
            raise ContractError(f"label values outside [0, {k})")
        cm += confusion_matrix(p, lab, k)
    return report_from_confusion(cm)


# ---------------------------------------------------------------- optimizers


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.dtype)


class SGD:
    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= (self.lr * (p.grad + self.weight_decay * p.data)).astype(p.dtype)


def make_optimizer(params: dict[str, Tensor], tc: TrainConfig):
    if tc.optimizer == "adamw":
        return AdamW(params, tc.lr, tc.weight_decay)
    return SGD(params, tc.lr, tc.weight_decay)


# ---------------------------------------------------------------- loops


def predict_labels(model, samples: Sequence[Sample]) -> list[np.ndarray]:
    from .model import forward

    return [forward(model, s.rgb, s.thermal).labels() for s in samples]


def evaluate(model, samples: Sequence[Sample], mask: str | None = None) -> MetricReport:
    """mIoU over ``samples``; ``mask="thermal_only"`` scores only pixels of
    RGB-invisible shapes."""
    preds = predict_labels(model, samples)
    labels = []
    for s in samples:
        lab = s.labels
        if mask == "thermal_only":
            lab = np.where(s.thermal_only, lab, IGNORE)
        labels.append(lab)
    return eval_miou(preds, labels, model.config.num_classes)


def train_toy(model, data: tuple[Sequence[Sample], Sequence[Sample]], tc: TrainConfig, log_every: int = 0) -> MetricReport:
    """Minibatch training with mean cross-entropy; returns the held-out report
    with the per-step training loss curve attached."""
    from .model import forward

    train, test = data
    if not train:
        raise ContractError("train_toy: empty training set")
    rng = np.random.default_rng(tc.seed)
    opt = make_optimizer(model.params, tc)
    curve: list[float] = []
    bs = min(tc.batch_size, len(train))
    for step in range(tc.steps):
        if not all(np.all(np.isfinite(t.data)) for t in model.params.values()):
            raise TrainingDivergence(step, float("nan"))
        model.zero_grad()
        total = 0.0
        for i in rng.choice(len(train), size=bs, replace=False):
            s = train[i]
            loss = cross_entropy(forward(model, s.rgb, s.thermal), s.labels)
            backward(T.scale(loss, 1.0 / bs))
            total += float(loss.data)
        mean_loss = total / bs
        if not math.isfinite(mean_loss):
            raise TrainingDivergence(step, mean_loss)
        curve.append(mean_loss)
        opt.step()
        if log_every and (step % log_every == 0 or step == tc.steps - 1):
            log.info("step %d loss %.4f", step, mean_loss)
    report = evaluate(model, test) if test else report_from_confusion(np.zeros((model.config.num_classes,) * 2, int))
    report.loss_curve = curve
    return report

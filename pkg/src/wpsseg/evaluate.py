"""Inference (plain and test-time augmented), confusion matrices and mIoU / mDice."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import resize_bilinear
from .datagen import IGNORE_INDEX, Scene
from .losses import softmax
from .model import ParamSet, forward


class EmptyMetricError(ValueError):
    pass


@dataclass
class TTAPolicy:
    flips: str = "horizontal"  # "none" | "horizontal"
    scales: list[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    fusion: str = "mean"

    def __post_init__(self):
        if self.flips not in ("none", "horizontal"):
            raise ValueError(f"flips must be 'none' or 'horizontal', got {self.flips!r}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be a nonempty list of positive numbers, got {self.scales}")
        if self.fusion != "mean":
            raise ValueError(f"only mean-of-probabilities fusion is supported, got {self.fusion!r}")

    @classmethod
    def identity(cls) -> "TTAPolicy":
        return cls(flips="none", scales=[1.0])

    def views(self) -> list[tuple[bool, float]]:
        flips = [False, True] if self.flips == "horizontal" else [False]
        return [(f, s) for s in self.scales for f in flips]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C) int64, rows = ground truth, cols = prediction
    ignored: int = 0

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), 0)

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def update(self, gt: np.ndarray, pred: np.ndarray) -> None:
        if gt.shape != pred.shape:
            raise ValueError(f"gt {gt.shape} and pred {pred.shape} differ in shape")
        c = self.counts.shape[0]
        valid = gt != IGNORE_INDEX
        self.ignored += int((~valid).sum())
        idx = gt[valid].astype(np.int64) * c + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix.zeros(num_classes)
    cm.update(np.asarray(gt), np.asarray(pred))
    return cm


def miou_mdice(cm: ConfusionMatrix):
    """Returns ``(miou, mdice, per_class)``.

    ``per_class`` holds ``(iou, dice)`` per class, or ``None`` for classes that
    never occur in ground truth or prediction; those are left out of both means.
    """
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = []
    ious, dices = [], []
    for k in range(counts.shape[0]):
        if union[k] == 0:
            per_class.append(None)
            continue
        iou = tp[k] / union[k]
        dice = 2 * tp[k] / (2 * tp[k] + fp[k] + fn[k])
        per_class.append((float(iou), float(dice)))
        ious.append(iou)
        dices.append(dice)
    if not ious:
        raise EmptyMetricError("no class has a nonzero denominator; mIoU/mDice undefined")
    return float(np.mean(ious)), float(np.mean(dices)), per_class


def predict(params: ParamSet, img: np.ndarray) -> np.ndarray:
    """Softmax probabilities ``(C, H, W)`` for ``(3, H, W)``; batched input works too."""
    x = np.asarray(img)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[-2] % 2 or x.shape[-1] % 2:
        raise ValueError(f"H and W must be even, got {x.shape[-2:]}")
    z, _ = forward(params, x.astype(params.dtype, copy=False))
    p = softmax(z, axis=1)
    return p[0] if single else p


def _even(n: float) -> int:
    return max(2, 2 * int(round(n / 2)))


def tta_predict(params: ParamSet, img: np.ndarray, policy: TTAPolicy) -> np.ndarray:
    """Mean of probability maps over flipped / rescaled views, mapped back to ``H x W``."""
    x = np.asarray(img)
    single = x.ndim == 3
    if single:
        x = x[None]
    h, w = x.shape[-2:]
    views = policy.views()
    if views == [(False, 1.0)]:
        p = predict(params, x)
        return p[0] if single else p
    acc = None
    for flip, scale in views:
        v = resize_bilinear(x, _even(h * scale), _even(w * scale))
        if flip:
            v = v[..., ::-1]
        p = predict(params, np.ascontiguousarray(v))
        if flip:
            p = p[..., ::-1]
        p = resize_bilinear(p, h, w)
        acc = p if acc is None else acc + p
    acc = acc / len(views)
    acc /= acc.sum(axis=1, keepdims=True)
    return acc[0] if single else acc


def predict_labels(params: ParamSet, images: np.ndarray, tta: Optional[TTAPolicy] = None,
                   batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i : i + batch_size]
        probs = predict(params, chunk) if tta is None else tta_predict(params, chunk, tta)
        out.append(probs.argmax(axis=1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_scenes(params: ParamSet, scenes: Sequence[Scene], num_classes: int,
                    tta: Optional[TTAPolicy] = None, degraded: bool = True, return_masks: bool = False):
    """Confusion matrix of ``params`` over ``scenes`` (degraded images by default)."""
    images = np.stack([sc.degraded if degraded else sc.clean for sc in scenes])
    labels = np.stack([sc.label for sc in scenes])
    preds = predict_labels(params, images, tta)
    cm = confusion_matrix(labels, preds, num_classes)
    return (cm, preds) if return_masks else cm


def metrics_dict(cm: ConfusionMatrix) -> dict:
    miou, mdice, per_class = miou_mdice(cm)
    return {
        "miou": miou,
        "mdice": mdice,
        "per_class": [
            None if pc is None else {"class": k, "iou": pc[0], "dice": pc[1]} for k, pc in enumerate(per_class)
        ],
    }

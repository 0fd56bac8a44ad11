"""Supervised CE, confidence-filtered pseudo-labels, the unsupervised consistency loss
and the weighted total.

Two flavours of each loss exist: the probability-space functions operate on
softmax outputs exactly as written (clamped log), and the ``*_logits`` variants
work from logits through log-softmax and also return the logit gradient, which is
what training uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import IGNORE_INDEX

PROB_FLOOR = 1e-12
LD_NORMALIZE_MODES = ("all_pixels", "confident_pixels")


class InvalidLabelError(ValueError):
    pass


class UnnormalizedProbsError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class PseudoPack:
    label: np.ndarray  # (..., H, W) int64
    conf: np.ndarray  # (..., H, W) uint8
    tau: float


@dataclass
class LossReport:
    l_c: float
    l_d: float
    total: float
    lam: float
    confident_fraction: float = 0.0


def softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def log_softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _batched(probs, labels):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim == 3:
        probs, labels = probs[None], labels[None]
    if probs.ndim != 4 or labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    return probs, labels


def _check_labels(labels, num_classes):
    bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
    if bad.any() or (labels < 0).any():
        raise InvalidLabelError(
            f"labels must lie in [0, {num_classes - 1}] or equal {IGNORE_INDEX}; "
            f"found {np.unique(labels[bad | (labels < 0)]).tolist()}"
        )


def _gather(arr, labels):
    # arr: (B, C, H, W); labels: (B, H, W) already valid for indexing
    return np.take_along_axis(arr, labels[:, None].astype(np.intp), axis=1)[:, 0]


def supervised_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean pixel CE over non-ignored pixels; ignored pixels leave numerator and denominator."""
    probs, labels = _batched(probs, labels)
    _check_labels(labels, probs.shape[1])
    valid = labels != IGNORE_INDEX
    n = int(valid.sum())
    if n == 0:
        return 0.0
    p = _gather(probs, np.where(valid, labels, 0))
    nll = -np.log(np.maximum(p, PROB_FLOOR))
    return float(nll[valid].sum() / n)


def supervised_loss_logits(logits: np.ndarray, labels: np.ndarray):
    """Same value as :func:`supervised_loss` on ``softmax(logits)``; returns ``(loss, dlogits)``."""
    logits, labels = _batched(logits, labels)
    _check_labels(labels, logits.shape[1])
    valid = labels != IGNORE_INDEX
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, grad
    safe = np.where(valid, labels, 0)
    logp = log_softmax(logits, axis=1)
    nll = -_gather(logp, safe)
    loss = float(nll[valid].sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None].astype(np.intp), _gather(grad, safe)[:, None] - 1.0, axis=1)
    grad *= (valid / n).astype(grad.dtype)[:, None]
    return loss, grad


def make_pseudo(teacher_probs: np.ndarray, tau: float) -> PseudoPack:
    """Argmax pseudo-label (lowest index wins ties) and the ``max prob >= tau`` mask."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    probs = np.asarray(teacher_probs)
    sums = probs.sum(axis=-3)
    worst = float(np.abs(sums - 1.0).max())
    if worst > 1e-4:
        raise UnnormalizedProbsError(f"probabilities do not sum to 1 per pixel (max deviation {worst:.3g})")
    label = probs.argmax(axis=-3)
    conf = (probs.max(axis=-3) >= tau).astype(np.uint8)
    return PseudoPack(label, conf, tau)


def _ld_denominator(conf1, conf2, normalize):
    if normalize == "all_pixels":
        return 2 * conf1.size
    if normalize == "confident_pixels":
        return int(conf1.sum()) + int(conf2.sum())
    raise ValueError(f"ld_normalize must be one of {LD_NORMALIZE_MODES}, got {normalize!r}")


def unsupervised_loss(p1: np.ndarray, p2: np.ndarray, pack1: PseudoPack, pack2: PseudoPack,
                      normalize: str = "all_pixels") -> float:
    """Confidence-weighted CE of both strong predictions against their pseudo-labels.

    With ``normalize="all_pixels"`` the sum is divided by ``2 * B_d * |Omega|``, so
    unconfident pixels dilute the loss.
    """
    p1, lab1 = _batched(p1, pack1.label)
    p2, lab2 = _batched(p2, pack2.label)
    c1 = np.asarray(pack1.conf).reshape(lab1.shape)
    c2 = np.asarray(pack2.conf).reshape(lab2.shape)
    if p1.shape != p2.shape:
        raise ValueError(f"strong predictions differ in shape: {p1.shape} vs {p2.shape}")
    denom = _ld_denominator(c1, c2, normalize)
    if denom == 0:
        return 0.0
    t1 = c1 * -np.log(np.maximum(_gather(p1, lab1), PROB_FLOOR))
    t2 = c2 * -np.log(np.maximum(_gather(p2, lab2), PROB_FLOOR))
    return float((t1.sum() + t2.sum()) / denom)


def unsupervised_loss_logits(z1, z2, label1, conf1, label2, conf2, normalize: str = "all_pixels"):
    """Logit-space :func:`unsupervised_loss`; returns ``(loss, dz1, dz2)``."""
    z1, label1 = _batched(z1, label1)
    z2, label2 = _batched(z2, label2)
    conf1 = np.asarray(conf1).reshape(label1.shape)
    conf2 = np.asarray(conf2).reshape(label2.shape)
    if z1.shape != z2.shape:
        raise ValueError(f"strong predictions differ in shape: {z1.shape} vs {z2.shape}")
    denom = _ld_denominator(conf1, conf2, normalize)
    if denom == 0:
        return 0.0, np.zeros_like(z1), np.zeros_like(z2)
    total = 0.0
    grads = []
    for z, lab, cf in ((z1, label1, conf1), (z2, label2, conf2)):
        logp = log_softmax(z, axis=1)
        w = cf.astype(z.dtype)
        total += float((w * -_gather(logp, lab)).sum())
        g = np.exp(logp)
        np.put_along_axis(g, lab[:, None].astype(np.intp), _gather(g, lab)[:, None] - 1.0, axis=1)
        g *= (w / denom)[:, None]
        grads.append(g)
    return total / denom, grads[0], grads[1]


def total_loss(l_c: float, l_d: float, lam: float, confident_fraction: float = 0.0) -> LossReport:
    for name, v in (("l_c", l_c), ("l_d", l_d), ("lambda", lam)):
        if not math.isfinite(v):
            raise NonFiniteError(f"{name} is not finite: {v}")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return LossReport(l_c, l_d, l_c + lam * l_d, lam, confident_fraction)

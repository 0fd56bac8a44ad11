"""Weak and strong augmentations with replayable transform records.

Images are ``(3, H, W)`` float arrays in ``[0, 1]``; label-like masks are
``(H, W)`` integer arrays.  Every random choice lands in a record so a view can be
replayed bit-exactly, and so pseudo-labels can be carried onto strong views.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .datagen import IGNORE_INDEX

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class WeakRecord:
    scale: float
    resized: tuple[int, int]
    crop: tuple[int, int, int, int]  # top, left, crop_h, crop_w in the padded resized frame
    flip: bool

    @classmethod
    def identity(cls, height: int, width: int) -> "WeakRecord":
        return cls(1.0, (height, width), (0, 0, height, width), False)


@dataclass(frozen=True)
class CutMixRecord:
    partner_index: int
    box: tuple[int, int, int, int]  # top, left, h, w


@dataclass(frozen=True)
class StrongRecord:
    jitter: tuple[float, float] = (1.0, 1.0)  # brightness_scale, contrast_scale
    to_gray: bool = False
    blur_sigma: float = 0.0
    cutmix: Optional[CutMixRecord] = None

    @property
    def is_appearance_identity(self) -> bool:
        return self.jitter == (1.0, 1.0) and not self.to_gray and self.blur_sigma == 0.0


@dataclass
class StrongPolicy:
    p_jitter: float = 0.8
    brightness: tuple[float, float] = (0.5, 1.5)
    contrast: tuple[float, float] = (0.5, 1.5)
    p_gray: float = 0.2
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    cutmix: bool = False
    p_cutmix: float = 0.5
    cutmix_area: tuple[float, float] = (0.1, 0.5)

    @classmethod
    def disabled(cls) -> "StrongPolicy":
        return cls(p_jitter=0.0, p_gray=0.0, p_blur=0.0, cutmix=False)


# --- resampling ------------------------------------------------------------------


def _source_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centres, edge clamped.
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    i0 = np.floor(x).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes of ``arr``."""
    in_h, in_w = arr.shape[-2:]
    if (in_h, in_w) == (out_h, out_w):
        return arr.copy()
    y0, y1, fy = _source_coords(out_h, in_h)
    x0, x1, fx = _source_coords(out_w, in_w)
    fy = fy.astype(arr.dtype)[:, None]
    fx = fx.astype(arr.dtype)
    top = arr[..., y0, :] * (1 - fy) + arr[..., y1, :] * fy
    return top[..., x0] * (1 - fx) + top[..., x1] * fx


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[-2:]
    yi = np.minimum(np.floor((np.arange(out_h) + 0.5) * in_h / out_h).astype(int), in_h - 1)
    xi = np.minimum(np.floor((np.arange(out_w) + 0.5) * in_w / out_w).astype(int), in_w - 1)
    return arr[..., yi[:, None], xi[None, :]]


# --- weak augmentation -------------------------------------------------------------


def sample_weak_record(rng: np.random.Generator, height: int, width: int, crop: int,
                       scale_range=(0.75, 1.25), p_flip: float = 0.5) -> WeakRecord:
    scale = float(rng.uniform(*scale_range))
    rh, rw = max(1, int(round(height * scale))), max(1, int(round(width * scale)))
    ph, pw = max(rh, crop), max(rw, crop)
    top = int(rng.integers(0, ph - crop + 1))
    left = int(rng.integers(0, pw - crop + 1))
    flip = bool(rng.random() < p_flip)
    return WeakRecord(scale, (rh, rw), (top, left, crop, crop), flip)


def replay_weak(arr: np.ndarray, record: WeakRecord, *, nearest: bool, fill) -> np.ndarray:
    """Apply a recorded weak transform to an image ``(C, H, W)`` or mask ``(H, W)``."""
    rh, rw = record.resized
    out = resize_nearest(arr, rh, rw) if nearest else resize_bilinear(arr, rh, rw)
    top, left, ch, cw = record.crop
    ph, pw = max(rh, top + ch), max(rw, left + cw)
    if (ph, pw) != (rh, rw):
        padded = np.full(arr.shape[:-2] + (ph, pw), fill, dtype=out.dtype)
        padded[..., :rh, :rw] = out
        out = padded
    out = out[..., top : top + ch, left : left + cw]
    if record.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def weak_augment(img: np.ndarray, label: Optional[np.ndarray], rng: np.random.Generator,
                 crop: int, scale_range=(0.75, 1.25), p_flip: float = 0.5):
    """Random resize, crop (padding with 0 / 255 when short) and horizontal flip.

    Returns ``(view, label_view_or_None, record)``.
    """
    _, height, width = img.shape
    record = sample_weak_record(rng, height, width, crop, scale_range, p_flip)
    view = replay_weak(img, record, nearest=False, fill=0)
    lab = None if label is None else replay_weak(label, record, nearest=True, fill=IGNORE_INDEX)
    return view, lab, record


def weak_valid_mask(shape: tuple[int, int], record: WeakRecord) -> np.ndarray:
    """1 where the weak view shows real image content, 0 on padding."""
    return replay_weak(np.ones(shape, dtype=np.uint8), record, nearest=True, fill=0)


# --- strong augmentation -----------------------------------------------------------


def _sample_box(rng, height, width, area_range):
    lo, hi = area_range
    total = height * width
    while True:
        area = rng.uniform(lo, hi) * total
        ratio = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        h = int(round(np.sqrt(area * ratio)))
        w = int(round(np.sqrt(area / ratio)))
        if 1 <= h <= height and 1 <= w <= width and lo <= h * w / total <= hi:
            break
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def sample_strong_record(rng: np.random.Generator, shape: tuple[int, int], policy: StrongPolicy,
                         partner_index: Optional[int] = None) -> StrongRecord:
    height, width = shape
    jitter = (1.0, 1.0)
    if rng.random() < policy.p_jitter:
        jitter = (float(rng.uniform(*policy.brightness)), float(rng.uniform(*policy.contrast)))
    to_gray = bool(rng.random() < policy.p_gray)
    blur = 0.0
    if rng.random() < policy.p_blur:
        blur = float(rng.uniform(*policy.blur_sigma))
    cutmix = None
    if policy.cutmix and partner_index is not None and rng.random() < policy.p_cutmix:
        cutmix = CutMixRecord(partner_index, _sample_box(rng, height, width, policy.cutmix_area))
    return StrongRecord(jitter, to_gray, blur, cutmix)


def adjust_brightness_contrast(img: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    out = np.clip(img * brightness, 0.0, 1.0)
    if contrast != 1.0:
        mean = np.tensordot(LUMA, out, axes=(0, 0)).mean()
        out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    return out.astype(img.dtype, copy=False)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    gray = np.tensordot(LUMA.astype(img.dtype), img, axes=(0, 0))
    # weights sum to 1 only up to rounding; pixels that are already gray stay exact
    gray = np.where((img[0] == img[1]) & (img[1] == img[2]), img[0], gray)
    return np.broadcast_to(gray, img.shape).astype(img.dtype)


def replay_strong(view: np.ndarray, record: StrongRecord, partner_view: Optional[np.ndarray] = None) -> np.ndarray:
    out = view
    if record.cutmix is not None:
        if partner_view is None:
            raise ValueError("record carries a CutMix box but no partner view was given")
        top, left, h, w = record.cutmix.box
        out = out.copy()
        out[:, top : top + h, left : left + w] = partner_view[:, top : top + h, left : left + w]
    if record.jitter != (1.0, 1.0):
        out = adjust_brightness_contrast(out, *record.jitter)
    if record.to_gray:
        out = to_grayscale(out)
    if record.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(0, record.blur_sigma, record.blur_sigma), mode="reflect")
    if out is view:
        out = view.copy()
    return out


def strong_augment(view: np.ndarray, rng: np.random.Generator, policy: StrongPolicy,
                   partner_view: Optional[np.ndarray] = None, partner_index: Optional[int] = None):
    """Returns ``(strong_view, record)``; CutMix is only drawn when a partner is supplied."""
    record = sample_strong_record(rng, view.shape[-2:], policy,
                                  partner_index if partner_view is not None else None)
    return replay_strong(view, record, partner_view), record


def align_pseudo(pseudo: np.ndarray, conf: np.ndarray, own_record: StrongRecord,
                 partner_pseudo: Optional[np.ndarray] = None, partner_conf: Optional[np.ndarray] = None):
    """Carry the weak-view pseudo-label and confidence onto a strong view."""
    if conf.shape != pseudo.shape:
        raise ValueError(f"pseudo {pseudo.shape} and conf {conf.shape} differ in shape")
    if own_record.cutmix is None:
        return pseudo, conf
    if partner_pseudo is None or partner_conf is None:
        raise ValueError("CutMix record requires partner pseudo-label and confidence")
    if partner_pseudo.shape != pseudo.shape or partner_conf.shape != conf.shape:
        raise ValueError(f"partner masks {partner_pseudo.shape}/{partner_conf.shape} do not match {pseudo.shape}")
    top, left, h, w = own_record.cutmix.box
    lab, cf = pseudo.copy(), conf.copy()
    lab[top : top + h, left : left + w] = partner_pseudo[top : top + h, left : left + w]
    cf[top : top + h, left : left + w] = partner_conf[top : top + h, left : left + w]
    return lab, cf

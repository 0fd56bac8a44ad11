"""Tiny CNN encoder/decoder with hand-written backward passes.

Encoder: conv3x3(3->16) ReLU, conv3x3/2(16->32) ReLU, conv3x3(32->C_e).
Decoder: conv3x3(C_e->16) ReLU, nearest upsample x2, conv1x1(16->C).

Arrays are NCHW.  The dtype of the parameters decides the compute precision, so
float64 parameter sets are used for finite-difference checks.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import (LossReport, NonFiniteError, supervised_loss_logits, total_loss,
                     unsupervised_loss_logits)

log = logging.getLogger(__name__)

FEATURE_CHANNELS = 32


def param_shapes(num_classes: int, c_e: int = FEATURE_CHANNELS) -> dict[str, tuple[int, ...]]:
    return {
        "enc.conv1.w": (16, 3, 3, 3),
        "enc.conv1.b": (16,),
        "enc.conv2.w": (32, 16, 3, 3),
        "enc.conv2.b": (32,),
        "enc.conv3.w": (c_e, 32, 3, 3),
        "enc.conv3.b": (c_e,),
        "dec.conv1.w": (16, c_e, 3, 3),
        "dec.conv1.b": (16,),
        "dec.conv2.w": (num_classes, 16, 1, 1),
        "dec.conv2.b": (num_classes,),
    }


@dataclass
class ParamSet:
    tensors: dict[str, np.ndarray]
    role: str = "student"

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def num_classes(self) -> int:
        return self.tensors["dec.conv2.b"].shape[0]

    @property
    def dtype(self):
        return self.tensors["enc.conv1.w"].dtype

    def copy(self, role: Optional[str] = None) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, role or self.role)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({k: v.astype(dtype) for k, v in self.tensors.items()}, self.role)

    def zeros_like(self, role: str = "grad") -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.tensors.items()}, role)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamSet") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def init_params(num_classes: int, seed: int = 0, dtype=np.float32, c_e: int = FEATURE_CHANNELS,
                role: str = "student") -> ParamSet:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    tensors = {}
    for name, shape in param_shapes(num_classes, c_e).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ParamSet(tensors, role)


# --- primitive kernels ---------------------------------------------------------------


def conv2d(x, w, b, stride=1, pad=1):
    """Returns ``(out, cols)``; ``cols`` is the im2col matrix kept for backward."""
    n, c, _, _ = x.shape
    f, _, k, _ = w.shape
    if k == 1 and stride == 1 and pad == 0:
        cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        ho, wo = x.shape[2:]
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        ho, wo = win.shape[2:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ w.reshape(f, -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)), cols


def conv2d_backward(dout, cols, x_shape, w, stride=1, pad=1, need_dx=True):
    n, c, h, wd = x_shape
    f, _, k, _ = w.shape
    _, _, ho, wo = dout.shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (cols.T @ dmat).T.reshape(w.shape)
    db = dmat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if k == 1 and stride == 1 and pad == 0:
        dcols = dmat @ w.reshape(f, -1)
        return np.ascontiguousarray(dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)), dw, db
    # Scatter in NHWC so every tap adds contiguous channel runs.
    dcols = (dmat @ w.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, :, i, j]
    return np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + wd].transpose(0, 3, 1, 2)), dw, db


def upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(d):
    n, c, h, w = d.shape
    return d.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --- network -----------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def _encode(params, x):
    a1, c1 = conv2d(x, params["enc.conv1.w"], params["enc.conv1.b"])
    r1 = np.maximum(a1, 0)
    a2, c2 = conv2d(r1, params["enc.conv2.w"], params["enc.conv2.b"], stride=2)
    r2 = np.maximum(a2, 0)
    e, c3 = conv2d(r2, params["enc.conv3.w"], params["enc.conv3.b"])
    return e, dict(x_shape=x.shape, c1=c1, a1=a1, r1_shape=r1.shape, c2=c2, a2=a2, r2_shape=r2.shape, c3=c3)


def _decode(params, e):
    a4, c4 = conv2d(e, params["dec.conv1.w"], params["dec.conv1.b"])
    r4 = np.maximum(a4, 0)
    u = upsample2(r4)
    z, c5 = conv2d(u, params["dec.conv2.w"], params["dec.conv2.b"], stride=1, pad=0)
    return z, dict(e_shape=e.shape, c4=c4, a4=a4, u_shape=u.shape, c5=c5)


def encode(params: ParamSet, img: np.ndarray) -> np.ndarray:
    """Feature map ``(C_e, H/2, W/2)`` (or batched) for an image ``(3, H, W)``."""
    x, single = _as_batch(img)
    if x.shape[1] != 3 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"expected (3, H, W) with even H, W; got {x.shape[-3:]}")
    e, _ = _encode(params, x.astype(params.dtype, copy=False))
    return e[0] if single else e


def decode(params: ParamSet, feat: np.ndarray) -> np.ndarray:
    """Logits ``(C, H, W)`` from a feature map ``(C_e, H/2, W/2)``."""
    e, single = _as_batch(feat)
    c_e = params["dec.conv1.w"].shape[1]
    if e.shape[1] != c_e:
        raise ValueError(f"feature map has {e.shape[1]} channels, decoder expects {c_e}")
    z, _ = _decode(params, e.astype(params.dtype, copy=False))
    return z[0] if single else z


def forward(params: ParamSet, x: np.ndarray, channel_scale: Optional[np.ndarray] = None):
    """Batched logits plus a cache for :func:`backward`.

    ``channel_scale`` is ``(N, C_e)`` and multiplies the encoder output per image;
    complementary dropout passes ``2 * mask`` here.
    """
    e, enc_cache = _encode(params, x)
    if channel_scale is not None:
        channel_scale = np.asarray(channel_scale, dtype=e.dtype)
        e = e * channel_scale[:, :, None, None]
    z, dec_cache = _decode(params, e)
    return z, dict(enc=enc_cache, dec=dec_cache, scale=channel_scale)


def backward(params: ParamSet, cache, dz, freeze_encoder: bool = False) -> ParamSet:
    grads = params.zeros_like()
    g = grads.tensors
    dc = cache["dec"]
    du, g["dec.conv2.w"], g["dec.conv2.b"] = conv2d_backward(dz, dc["c5"], dc["u_shape"], params["dec.conv2.w"], 1, 0)
    dr4 = upsample2_backward(du)
    da4 = dr4 * (dc["a4"] > 0)
    de, g["dec.conv1.w"], g["dec.conv1.b"] = conv2d_backward(
        da4, dc["c4"], dc["e_shape"], params["dec.conv1.w"], need_dx=not freeze_encoder)
    if freeze_encoder:
        return grads
    if cache["scale"] is not None:
        de = de * cache["scale"][:, :, None, None]
    ec = cache["enc"]
    dr2, g["enc.conv3.w"], g["enc.conv3.b"] = conv2d_backward(de, ec["c3"], ec["r2_shape"], params["enc.conv3.w"])
    da2 = dr2 * (ec["a2"] > 0)
    dr1, g["enc.conv2.w"], g["enc.conv2.b"] = conv2d_backward(da2, ec["c2"], ec["r1_shape"], params["enc.conv2.w"], stride=2)
    da1 = dr1 * (ec["a1"] > 0)
    _, g["enc.conv1.w"], g["enc.conv1.b"] = conv2d_backward(
        da1, ec["c1"], ec["x_shape"], params["enc.conv1.w"], need_dx=False)
    return grads


# --- complementary channel dropout ---------------------------------------------------


def sample_complementary_masks(rng: np.random.Generator, keep_prob: float = 0.5,
                               channels: int = FEATURE_CHANNELS, batch: Optional[int] = None):
    """A Bernoulli(keep_prob) channel mask and its exact complement (``uint8``)."""
    if not 0.0 < keep_prob < 1.0:
        raise ValueError(f"keep_prob must be in (0, 1), got {keep_prob}")
    if keep_prob != 0.5:
        log.warning("keep_prob=%s: the x2 rescale is only unbiased at 0.5", keep_prob)
    shape = (channels,) if batch is None else (batch, channels)
    m1 = (rng.random(shape) < keep_prob).astype(np.uint8)
    return m1, 1 - m1


def apply_channel_dropout(feat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``2 * mask[k] * feat[k]`` per channel, for ``(C_e, h, w)`` or batched input."""
    mask = np.asarray(mask)
    if mask.shape[-1] != feat.shape[-3]:
        raise ValueError(f"mask length {mask.shape[-1]} != channel count {feat.shape[-3]}")
    return feat * (2 * mask).astype(feat.dtype)[..., None, None]


# --- EMA -----------------------------------------------------------------------------


def ema_update(teacher: ParamSet, student: ParamSet, gamma: float) -> None:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"{name}: teacher {t.shape} vs student {s.shape}")
        t *= gamma
        t += (1.0 - gamma) * s


# --- loss + gradients ----------------------------------------------------------------


@dataclass
class StepBatch:
    """One training step's student inputs.  The strong fields are ``None`` for clean-only steps."""

    clean: np.ndarray  # (B_c, 3, H, W)
    labels: np.ndarray  # (B_c, H, W)
    strong1: Optional[np.ndarray] = None  # (B_d, 3, H, W)
    strong2: Optional[np.ndarray] = None
    mask1: Optional[np.ndarray] = None  # (B_d, C_e) uint8
    mask2: Optional[np.ndarray] = None
    pseudo1: Optional[np.ndarray] = None  # (B_d, H, W)
    conf1: Optional[np.ndarray] = None
    pseudo2: Optional[np.ndarray] = None
    conf2: Optional[np.ndarray] = None

    @property
    def has_unlabeled(self) -> bool:
        return self.strong1 is not None


@dataclass
class LossSpec:
    lam: float = 1.0
    ld_normalize: str = "all_pixels"
    freeze_encoder: bool = False


def _first_nonfinite(params, cache, z):
    for name, v in params.items():
        if not np.all(np.isfinite(v)):
            return f"parameter {name}"
    for key in ("a1", "a2"):
        if not np.all(np.isfinite(cache["enc"][key])):
            return f"activation enc.{key}"
    if not np.all(np.isfinite(cache["dec"]["a4"])):
        return "activation dec.a4"
    if not np.all(np.isfinite(z)):
        return "logits"
    return "loss"


def forward_backward(params: ParamSet, batch: StepBatch, spec: LossSpec = LossSpec()):
    """Total loss ``L_c + lam * L_d`` and its gradient w.r.t. ``params``.

    Clean images and both strong views run through one batched pass; the strong
    views get per-image channel scales ``2*M`` and ``2*(1-M)``.
    Returns ``(LossReport, grads)``.
    """
    dtype = params.dtype
    bc = batch.clean.shape[0]
    parts = [batch.clean]
    scale = None
    if batch.has_unlabeled:
        bd = batch.strong1.shape[0]
        parts += [batch.strong1, batch.strong2]
        c_e = params["enc.conv3.b"].shape[0]
        scale = np.concatenate([np.ones((bc, c_e)), 2.0 * batch.mask1, 2.0 * batch.mask2]).astype(dtype)
    x = np.concatenate(parts).astype(dtype, copy=False)
    z, cache = forward(params, x, scale)

    l_c, dz_c = supervised_loss_logits(z[:bc], batch.labels)
    l_d, frac = 0.0, 0.0
    dz = np.empty_like(z)
    dz[:bc] = dz_c
    if batch.has_unlabeled:
        l_d, dz1, dz2 = unsupervised_loss_logits(
            z[bc : bc + bd], z[bc + bd :], batch.pseudo1, batch.conf1, batch.pseudo2, batch.conf2,
            spec.ld_normalize)
        dz[bc : bc + bd] = spec.lam * dz1
        dz[bc + bd :] = spec.lam * dz2
        frac = float((batch.conf1.mean() + batch.conf2.mean()) / 2)
    if not (np.isfinite(l_c) and np.isfinite(l_d)):
        raise NonFiniteError(f"non-finite loss (l_c={l_c}, l_d={l_d}); first offending tensor: "
                             f"{_first_nonfinite(params, cache, z)}")
    report = total_loss(l_c, l_d, spec.lam, frac)
    grads = backward(params, cache, dz, freeze_encoder=spec.freeze_encoder)
    for name, gv in grads.items():
        if not np.all(np.isfinite(gv)):
            raise NonFiniteError(f"non-finite gradient; first offending tensor: {name}")
    return report, grads


def loss_only(params: ParamSet, batch: StepBatch, spec: LossSpec = LossSpec()) -> float:
    """Total loss without the backward pass (finite-difference probes)."""
    dtype = params.dtype
    z_c, _ = forward(params, batch.clean.astype(dtype, copy=False))
    l_c, _ = supervised_loss_logits(z_c, batch.labels)
    if not batch.has_unlabeled:
        return l_c
    z1, _ = forward(params, batch.strong1.astype(dtype, copy=False), 2.0 * batch.mask1)
    z2, _ = forward(params, batch.strong2.astype(dtype, copy=False), 2.0 * batch.mask2)
    l_d, _, _ = unsupervised_loss_logits(z1, z2, batch.pseudo1, batch.conf1, batch.pseudo2, batch.conf2,
                                         spec.ld_normalize)
    return l_c + spec.lam * l_d

"""Central finite-difference oracle for :func:`wpsseg.model.forward_backward`.

Only forward kernels are used.  A perturbation of weight ``W[f, c, i, j]`` of a
conv layer shifts that layer's pre-activation in channel ``f`` by
``eps * cols[:, (c, i, j)]`` (conv is linear in its weights), so many
perturbations are stacked along the batch axis and pushed through the rest of
the network together.

The network is piecewise linear, so a probe of size ``eps`` can cross a ReLU
kink, where the loss has no derivative.  Probes therefore run with every gate
frozen at the base point.  On that linear piece the logits are affine in any
single parameter, so one ``+eps`` probe fixes the whole line
``z(t) = z0 + t * (z(+eps) - z0)`` and the loss is sampled on it at
``t = -2, -1, 1, 2`` for the 4th-order central stencil.  Coordinates where a
live gate would flip within ``+-eps`` are reported as ``kinked``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import IGNORE_INDEX
from .model import LossSpec, ParamSet, StepBatch, conv2d, upsample2

# (param prefix, stride, pad); ReLU follows layers 0, 1 and 3
_LAYERS = [
    ("enc.conv1", 1, 1),
    ("enc.conv2", 2, 1),
    ("enc.conv3", 1, 1),
    ("dec.conv1", 1, 1),
    ("dec.conv2", 1, 0),
]
_GATE = {0: 0, 1: 1, 3: 2}  # layer index -> gate index
_GATE_LAYER = {g: layer for layer, g in _GATE.items()}


@dataclass
class GradCheckResult:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray  # central differences on the base point's linear piece
    kinked: np.ndarray  # bool: a live gate would flip within +-eps

    def rel_error(self, floor: float = 1e-8) -> np.ndarray:
        return np.abs(self.analytic - self.numeric) / np.maximum(
            np.maximum(np.abs(self.analytic), np.abs(self.numeric)), floor)


def _inputs(batch: StepBatch, dtype):
    parts = [batch.clean]
    if batch.has_unlabeled:
        parts += [batch.strong1, batch.strong2]
    return np.concatenate(parts).astype(dtype)


def _channel_scale(batch: StepBatch, c_e: int, dtype):
    bc = batch.clean.shape[0]
    if not batch.has_unlabeled:
        return np.ones((bc, c_e), dtype=dtype)
    return np.concatenate([np.ones((bc, c_e)), 2.0 * batch.mask1, 2.0 * batch.mask2]).astype(dtype)


def _group_loss(z: np.ndarray, k: int, batch: StepBatch, spec: LossSpec) -> np.ndarray:
    """Total loss for each of ``k`` stacked copies of the batch."""
    n = z.shape[0] // k
    z = z.reshape((k, n) + z.shape[1:])
    logp = z - z.max(axis=2, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=2, keepdims=True))
    bc = batch.clean.shape[0]
    labels = np.asarray(batch.labels)
    valid = labels != IGNORE_INDEX
    safe = np.where(valid, labels, 0)
    nll = -np.take_along_axis(logp[:, :bc], np.broadcast_to(safe[None, :, None], (k, bc, 1) + safe.shape[1:]), axis=2)[:, :, 0]
    l_c = (nll * valid).sum(axis=(1, 2, 3)) / max(int(valid.sum()), 1)
    if not batch.has_unlabeled:
        return l_c
    bd = batch.strong1.shape[0]
    terms = 0.0
    for off, lab, cf in ((bc, batch.pseudo1, batch.conf1), (bc + bd, batch.pseudo2, batch.conf2)):
        lab = np.asarray(lab)
        part = logp[:, off : off + bd]
        nll = -np.take_along_axis(part, np.broadcast_to(lab[None, :, None], (k, bd, 1) + lab.shape[1:]), axis=2)[:, :, 0]
        terms = terms + (nll * np.asarray(cf)).sum(axis=(1, 2, 3))
    if spec.ld_normalize == "all_pixels":
        denom = 2 * np.asarray(batch.conf1).size
    else:
        denom = int(np.asarray(batch.conf1).sum() + np.asarray(batch.conf2).sum())
    l_d = terms / denom if denom else 0.0 * terms
    return l_c + spec.lam * l_d


def _base_activations(params, x, scale):
    pres, cols = [], []
    h = x
    for idx, (name, stride, pad) in enumerate(_LAYERS):
        out, c = conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
        pres.append(out)
        cols.append(c)
        h = out
        if idx in _GATE:
            h = np.maximum(h, 0)
            if idx == 3:
                h = upsample2(h)
        elif idx == 2:
            h = h * scale[:, :, None, None]
    return pres, cols


def _post(idx, pre, gate, scale):
    """Frozen-gate activation following layer ``idx``."""
    if idx in _GATE:
        h = pre * gate
        return upsample2(h) if idx == 3 else h
    if idx == 2:
        return pre * scale[:, :, None, None]
    return pre


def _probe_chunk(params, layer, f, delta_f, pres, scale, gates, k):
    """Frozen-gate logits for ``k`` stacked copies whose ``layer`` pre-activation
    differs from the base only in channel ``f`` (by ``delta_f``).

    Returns ``(logits, [(gate index, perturbed pre-activation, channel or None)])``.
    """
    seen = []
    if layer in _GATE:
        seen.append((_GATE[layer], np.tile(pres[layer][:, f], (k, 1, 1)) + delta_f, f))
    if layer == len(_LAYERS) - 1:
        z = np.tile(pres[layer], (k, 1, 1, 1))
        z[:, f] += delta_f
        return z, seen
    # The next pre-activation moves by conv(delta) restricted to input channel f.
    gate_f = np.tile(gates[_GATE[layer]][:, f : f + 1], (k, 1, 1, 1)) if layer in _GATE else None
    act = _post(layer, delta_f[:, None], gate_f, np.tile(scale[:, f : f + 1], (k, 1)))
    name, stride, pad = _LAYERS[layer + 1]
    w = params[f"{name}.w"][:, f : f + 1]
    inc, _ = conv2d(act, w, np.zeros(w.shape[0], dtype=w.dtype), stride, pad)
    h = np.tile(pres[layer + 1], (k, 1, 1, 1)) + inc
    big_scale = np.tile(scale, (k, 1))
    for idx in range(layer + 1, len(_LAYERS)):
        if idx != layer + 1:
            name, stride, pad = _LAYERS[idx]
            h, _ = conv2d(h, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
        if idx in _GATE:
            seen.append((_GATE[idx], h, None))
        if idx < len(_LAYERS) - 1:
            gate = np.tile(gates[_GATE[idx]], (k, 1, 1, 1)) if idx in _GATE else None
            h = _post(idx, h, gate, big_scale)
    return h, seen


def _flips(seen, pres, k):
    """Per-copy flag: a live gate changes state at ``+eps`` or ``-eps``."""
    out = np.zeros(k, dtype=bool)
    for gi, pert, chan in seen:
        base = pres[_GATE_LAYER[gi]]
        if chan is not None:
            base = base[:, chan]
        base = np.tile(base, (k,) + (1,) * (base.ndim - 1))
        on = base > 0
        # pre-activations are affine in the parameter, so the -eps point mirrors +eps
        hit = ((pert > 0) != on) | ((2 * base - pert > 0) != on)
        out |= hit.reshape(k, -1).any(axis=1)
    return out


def _probe(params, batch, spec, layer, suffix, shape, coords, pres, cols, scale, gates, z0, eps, chunk):
    """4th-order central differences for ``coords`` of one tensor; returns ``(diffs, kinked)``."""
    pre = pres[layer]
    n, _, ho, wo = pre.shape
    diffs = np.empty(len(coords))
    kinked = np.zeros(len(coords), dtype=bool)
    # Coordinates are grouped by output channel so each chunk perturbs one channel.
    order = sorted(range(len(coords)), key=lambda i: coords[i][0])
    groups = []
    for i in order:
        f = coords[i][0]
        if groups and groups[-1][0] == f and len(groups[-1][1]) < chunk:
            groups[-1][1].append(i)
        else:
            groups.append((f, [i]))
    for f, members in groups:
        k = len(members)
        delta = np.empty((k, n, ho, wo), dtype=pre.dtype)
        for j, i in enumerate(members):
            if suffix == "w":
                col = int(np.ravel_multi_index(coords[i][1:], shape[1:]))
                delta[j] = cols[layer][:, col].reshape(n, ho, wo)
            else:
                delta[j] = 1.0
        z, seen = _probe_chunk(params, layer, f, eps * delta.reshape(k * n, ho, wo), pres, scale, gates, k)
        kinked[members] = _flips(seen, pres, k)
        mid = np.tile(z0, (k, 1, 1, 1))
        step = z - mid
        loss = {t: _group_loss(mid + t * step, k, batch, spec) for t in (2, 1, -1, -2)}
        diffs[members] = (-loss[2] + 8 * loss[1] - 8 * loss[-1] + loss[-2]) / (12 * eps)
    return diffs, kinked


def numeric_gradients(params: ParamSet, batch: StepBatch, spec: LossSpec = LossSpec(),
                      eps: float = 1e-3, names=None, chunk: int = 128) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """``{name: (numeric, kinked)}`` for every coordinate of every requested tensor."""
    dtype = params.dtype
    x = _inputs(batch, dtype)
    scale = _channel_scale(batch, params["enc.conv3.b"].shape[0], dtype)
    pres, cols = _base_activations(params, x, scale)
    gates = [(pres[i] > 0).astype(dtype) for i in (0, 1, 3)]
    z0 = pres[-1]
    out = {}
    for layer, (lname, _, _) in enumerate(_LAYERS):
        for suffix in ("w", "b"):
            pname = f"{lname}.{suffix}"
            if names is not None and pname not in names:
                continue
            shape = params[pname].shape
            if spec.freeze_encoder and pname.startswith("enc."):
                out[pname] = (np.zeros(shape), np.zeros(shape, dtype=bool))
                continue
            coords = list(np.ndindex(shape))
            num, kinked = _probe(params, batch, spec, layer, suffix, shape, coords, pres, cols, scale, gates,
                                 z0, eps, chunk)
            out[pname] = (num.reshape(shape), kinked.reshape(shape))
    return out


def check_gradients(params: ParamSet, batch: StepBatch, analytic: ParamSet, spec: LossSpec = LossSpec(),
                    eps: float = 1e-3, names=None) -> list[GradCheckResult]:
    numeric = numeric_gradients(params, batch, spec, eps, names)
    return [GradCheckResult(name, np.asarray(analytic[name], dtype=np.float64), *vals)
            for name, vals in numeric.items()]


def random_problem(seed: int, num_classes: int = 4, size: int = 16, batch_clean: int = 1,
                   batch_degraded: int = 1, ignore_frac: float = 0.1):
    """Seeded float64 ``(params, batch)`` pair with random biases, labels, masks and confidences."""
    from .model import init_params, sample_complementary_masks

    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    params = init_params(num_classes, seed, np.float64)
    for name in params:
        if name.endswith(".b"):
            params[name] = rng.normal(0.0, 0.1, params[name].shape)
    shape = (size, size)
    labels = rng.integers(0, num_classes, (batch_clean,) + shape)
    labels[rng.random(labels.shape) < ignore_frac] = IGNORE_INDEX
    m1, m2 = sample_complementary_masks(rng, 0.5, params["enc.conv3.b"].shape[0], batch=batch_degraded)
    batch = StepBatch(
        clean=rng.random((batch_clean, 3) + shape),
        labels=labels,
        strong1=rng.random((batch_degraded, 3) + shape),
        strong2=rng.random((batch_degraded, 3) + shape),
        mask1=m1, mask2=m2,
        pseudo1=rng.integers(0, num_classes, (batch_degraded,) + shape),
        conf1=(rng.random((batch_degraded,) + shape) < 0.5).astype(np.uint8),
        pseudo2=rng.integers(0, num_classes, (batch_degraded,) + shape),
        conf2=(rng.random((batch_degraded,) + shape) < 0.5).astype(np.uint8),
    )
    return params, batch


def summarize(results: list[GradCheckResult], floor: float = 1e-8) -> dict[str, tuple[float, float]]:
    """``{name: (max per-coordinate rel. error, norm-wise rel. error)}``.

    ``floor`` keeps coordinates whose gradient is numerically zero from dividing by ~0.
    """
    out = {}
    for r in results:
        coord = float(r.rel_error(floor).max()) if r.analytic.size else 0.0
        scale = max(np.linalg.norm(r.analytic), np.linalg.norm(r.numeric), floor)
        out[r.name] = (coord, float(np.linalg.norm(r.analytic - r.numeric) / scale))
    return out

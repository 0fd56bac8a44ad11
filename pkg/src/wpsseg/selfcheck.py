"""Fast invariant suite behind ``wpsseg selfcheck``."""
from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import IGNORE_INDEX, generate_split, read_shard, write_shard
from .gradcheck import check_gradients, random_problem, summarize
from .losses import PseudoPack, make_pseudo, softmax, supervised_loss, unsupervised_loss
from .model import LossSpec, ema_update, forward_backward, init_params, sample_complementary_masks

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def check_gradient(corrupt: bool = False) -> tuple[bool, str]:
    params, batch = random_problem(0, num_classes=3, size=8)
    spec = LossSpec()
    _, grads = forward_backward(params, batch, spec)
    if corrupt:
        grads["enc.conv1.w"] = grads["enc.conv1.w"] * 1.01
    stats = summarize(check_gradients(params, batch, grads, spec))
    worst_name = max(stats, key=lambda k: max(stats[k]))
    worst = max(stats[worst_name])
    ok = worst < GRAD_TOL
    return ok, f"worst relative error {worst:.2e} in {worst_name} (tol {GRAD_TOL:g})"


def check_losses() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    c, h, w = 4, 5, 6
    probs = softmax(rng.normal(size=(c, h, w)))
    labels = rng.integers(0, c, (h, w))
    labels[0, :3] = IGNORE_INDEX
    ref, n = 0.0, 0
    for i in range(h):
        for j in range(w):
            if labels[i, j] != IGNORE_INDEX:
                ref -= np.log(probs[labels[i, j], i, j])
                n += 1
    err_c = abs(supervised_loss(probs, labels) - ref / n)

    p1, p2 = softmax(rng.normal(size=(c, h, w))), softmax(rng.normal(size=(c, h, w)))
    packs = [PseudoPack(rng.integers(0, c, (h, w)), (rng.random((h, w)) < 0.5).astype(np.uint8), 0.95)
             for _ in range(2)]
    ref_d = 0.0
    for p, pk in zip((p1, p2), packs):
        for i in range(h):
            for j in range(w):
                if pk.conf[i, j]:
                    ref_d -= np.log(p[pk.label[i, j], i, j])
    err_d = abs(unsupervised_loss(p1, p2, *packs) - ref_d / (2 * h * w))
    worst = max(err_c, err_d)
    return worst < 1e-10, f"max deviation from per-pixel loops {worst:.1e}"


def check_ema() -> tuple[bool, str]:
    t = init_params(2, 0, np.float64)
    s = t.copy()
    for k in t:
        t[k][...] = 1.0
        s[k][...] = 0.5
    ema_update(t, s, 0.99)
    probe = abs(float(t["enc.conv1.b"][0]) - 0.995)
    t0 = np.array([1.0]).copy()
    for k in t:
        t[k][...] = t0
        s[k][...] = 0.0
    for _ in range(100):
        ema_update(t, s, 0.99)
    decay = abs(float(t["enc.conv1.b"][0]) - 0.99 ** 100)
    worst = max(probe, decay)
    return worst < 1e-12, f"probe error {probe:.1e}, 100-step decay error {decay:.1e}"


def check_dropout() -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    m1, m2 = sample_complementary_masks(rng, 0.5, 32, batch=1000)
    disjoint = not np.any(m1 & m2)
    exhaustive = bool(np.all(m1 | m2))
    return disjoint and exhaustive, f"disjoint={disjoint} exhaustive={exhaustive} over 1000 pairs"


def check_pseudo() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    probs = softmax(rng.normal(scale=4.0, size=(5, 16, 16)))
    pack = make_pseudo(probs, 0.95)
    ok = np.array_equal(pack.conf, (probs.max(axis=0) >= 0.95).astype(np.uint8))
    return ok, "confidence bit equals the threshold indicator" if ok else "confidence bit mismatch"


def check_formats() -> tuple[bool, str]:
    scenes = generate_split(3, 5, 0, size=16, num_classes=4)
    with tempfile.TemporaryDirectory() as d:
        shard = os.path.join(d, "s.wps")
        write_shard(scenes, shard, 4)
        back, c = read_shard(shard)
        shard_ok = c == 4 and all(a == b for a, b in zip(scenes, back))
        p = init_params(4, 1)
        ck = Checkpoint(p, p.copy("teacher"), {k: np.ones_like(v) for k, v in p.items()}, 7, 1, {"seed": 1})
        path = os.path.join(d, "c.wpsckpt")
        save_checkpoint(ck, path)
        again = load_checkpoint(path)
        ck_ok = again.student.equal(p) and again.step == 7 and again.config == {"seed": 1}
    return shard_ok and ck_ok, f"shard round trip {'ok' if shard_ok else 'BROKEN'}, checkpoint {'ok' if ck_ok else 'BROKEN'}"


def run_selfcheck(corrupt_gradient: bool = False) -> list[CheckResult]:
    checks = [
        ("gradient", lambda: check_gradient(corrupt_gradient)),
        ("loss oracles", check_losses),
        ("ema arithmetic", check_ema),
        ("dropout complementarity", check_dropout),
        ("pseudo-label threshold", check_pseudo),
        ("shard/checkpoint round trip", check_formats),
    ]
    out = []
    for name, fn in checks:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failing check
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out

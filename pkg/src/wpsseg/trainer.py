"""Teacher-student training loop.

Each optimizer step:

1. draw ``batch_clean`` labelled clean scenes (with replacement) and the next
   ``batch_degraded`` unlabelled degraded scenes of the epoch permutation;
2. weak-augment everything;
3. (semi mode) the teacher labels the weak degraded views, two strong views per
   image get complementary channel masks;
4. one fused student forward/backward for ``L_c + lam * L_d``;
5. SGD with momentum, decoder group at ``lr * head_lr_mult``, poly decay;
6. EMA update of the teacher.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import StrongPolicy, align_pseudo, strong_augment, weak_augment, weak_valid_mask
from .checkpoint import Checkpoint
from .datagen import Scene
from .evaluate import evaluate_scenes, miou_mdice
from .losses import LD_NORMALIZE_MODES, LossReport, NonFiniteError, make_pseudo, softmax
from .model import (LossSpec, ParamSet, StepBatch, ema_update, forward, forward_backward, init_params,
                    sample_complementary_masks)

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "l_c", "l_d", "total", "confident_fraction", "lr", "val_miou"]

# RNG substream tags
_CLEAN, _WEAK, _STRONG1, _STRONG2, _MASK, _PARTNER, _SAMPLE = range(7)


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    tau: float = 0.95
    lam: float = 1.0
    gamma: float = 0.99
    lr: float = 1e-3
    head_lr_mult: float = 1.0
    momentum: float = 0.9
    batch_clean: int = 8
    batch_degraded: int = 8
    epochs: int = 60
    crop: int = 64
    seed: int = 42
    freeze_encoder: bool = False
    mode: str = "semi"  # "semi" | "clean_only"
    deterministic: bool = True
    keep_prob: float = 0.5
    ld_normalize: str = "all_pixels"
    burnin_steps: int = 0
    weak_scale: tuple[float, float] = (0.75, 1.25)
    strong: StrongPolicy = field(default_factory=StrongPolicy)

    def validate(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.batch_clean < 1 or self.batch_degraded < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.crop < 2 or self.crop % 2:
            raise ConfigError(f"crop must be even, got {self.crop}")
        if self.mode not in ("semi", "clean_only"):
            raise ConfigError(f"mode must be 'semi' or 'clean_only', got {self.mode!r}")
        if self.ld_normalize not in LD_NORMALIZE_MODES:
            raise ConfigError(f"ld_normalize must be one of {LD_NORMALIZE_MODES}")
        if not 0.0 < self.keep_prob < 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1), got {self.keep_prob}")
        if self.epochs < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 1 and lr > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepTrace:
    step: int
    epoch: int
    loss_report: LossReport
    ema_applied: bool
    lr_used: float


class TrainData:
    """Splits a train shard into labelled clean scenes and unlabelled degraded scenes.

    The first ``len // 2`` scenes contribute their clean image and label, the rest
    only their degraded image.  Reads are counted so clean-only runs can prove they
    never touch the degraded set.
    """

    def __init__(self, scenes: Sequence[Scene], num_classes: int):
        if len(scenes) < 2:
            raise ConfigError("training needs at least two scenes")
        half = len(scenes) // 2
        self._clean = [(sc.clean, sc.label) for sc in scenes[:half]]
        self._degraded = [sc.degraded for sc in scenes[half:]]
        self.num_classes = num_classes
        self.clean_reads = 0
        self.degraded_reads = 0

    @property
    def n_clean(self) -> int:
        return len(self._clean)

    @property
    def n_degraded(self) -> int:
        return len(self._degraded)

    def clean(self, i: int):
        self.clean_reads += 1
        return self._clean[i]

    def degraded(self, i: int) -> np.ndarray:
        self.degraded_reads += 1
        return self._degraded[i]


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def poly_lr(base: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base * (1.0 - step / total_steps) ** power


def sgd_step(params: ParamSet, grads: ParamSet, momentum_state: dict, lr: float, head_lr_mult: float = 1.0,
             freeze_encoder: bool = False, momentum: float = 0.9) -> None:
    """``v = momentum * v + g``; ``p -= lr_group * v``.  Decoder tensors use ``lr * head_lr_mult``."""
    for name, p in params.items():
        if freeze_encoder and name.startswith("enc."):
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad {g.shape} vs param {p.shape}")
        v = momentum_state.get(name)
        if v is None:
            v = momentum_state[name] = np.zeros_like(p)
        v *= momentum
        v += g
        group_lr = lr * head_lr_mult if name.startswith("dec.") else lr
        p -= np.asarray(group_lr, dtype=p.dtype) * v


def steps_per_epoch(cfg: TrainConfig, data: TrainData) -> int:
    return max(1, data.n_degraded // cfg.batch_degraded)


def build_step_batch(cfg: TrainConfig, data: TrainData, teacher: ParamSet, epoch: int, step: int,
                     clean_idx: Sequence[int], deg_idx: Optional[Sequence[int]]) -> StepBatch:
    """Augmented student inputs for one step; ``deg_idx=None`` skips the unlabelled branch."""
    dtype = teacher.dtype
    clean_views, clean_labels = [], []
    for slot, i in enumerate(clean_idx):
        img, lab = data.clean(i)
        v, lv, _ = weak_augment(img, lab, _rng(cfg.seed, _CLEAN, epoch, step, slot), cfg.crop, cfg.weak_scale)
        clean_views.append(v)
        clean_labels.append(lv)
    batch = StepBatch(np.stack(clean_views).astype(dtype), np.stack(clean_labels))
    if deg_idx is None:
        return batch

    weak, valid = [], []
    for slot, i in enumerate(deg_idx):
        img = data.degraded(i)
        v, _, rec = weak_augment(img, None, _rng(cfg.seed, _WEAK, epoch, step, slot), cfg.crop, cfg.weak_scale)
        weak.append(v)
        valid.append(weak_valid_mask(img.shape[-2:], rec))
    weak = np.stack(weak).astype(dtype)
    z, _ = forward(teacher, weak)
    pack = make_pseudo(softmax(z, axis=1), cfg.tau)
    conf = pack.conf * np.stack(valid)
    label = pack.label

    bd = len(deg_idx)
    views = {1: [], 2: []}
    aligned = {1: ([], []), 2: ([], [])}
    for slot in range(bd):
        partner = None
        if cfg.strong.cutmix and bd > 1:
            partner = int((slot + 1 + _rng(cfg.seed, _PARTNER, epoch, step, slot).integers(bd - 1)) % bd)
        for view, tag in ((1, _STRONG1), (2, _STRONG2)):
            rng = _rng(cfg.seed, tag, epoch, step, slot)
            s, rec = strong_augment(weak[slot], rng, cfg.strong,
                                    None if partner is None else weak[partner], partner)
            lab, cf = align_pseudo(label[slot], conf[slot], rec,
                                   None if partner is None else label[partner],
                                   None if partner is None else conf[partner])
            views[view].append(s)
            aligned[view][0].append(lab)
            aligned[view][1].append(cf)
    c_e = teacher["enc.conv3.b"].shape[0]
    m1, m2 = sample_complementary_masks(_rng(cfg.seed, _MASK, epoch, step), cfg.keep_prob, c_e, batch=bd)
    batch.strong1 = np.stack(views[1]).astype(dtype)
    batch.strong2 = np.stack(views[2]).astype(dtype)
    batch.mask1, batch.mask2 = m1, m2
    batch.pseudo1, batch.conf1 = np.stack(aligned[1][0]), np.stack(aligned[1][1])
    batch.pseudo2, batch.conf2 = np.stack(aligned[2][0]), np.stack(aligned[2][1])
    return batch


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[dict]
    traces: list[StepTrace]
    data: TrainData


def format_row(row: dict) -> list[str]:
    out = []
    for key in METRICS_HEADER:
        v = row.get(key)
        out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
    return out


def metrics_csv(rows: Sequence[dict], config: Optional[dict] = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config=" + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow(format_row(r))
    return buf.getvalue()


def train(cfg: TrainConfig, train_scenes: Sequence[Scene], num_classes: int,
          val_scenes: Optional[Sequence[Scene]] = None, resume: Optional[Checkpoint] = None,
          max_steps: Optional[int] = None, on_epoch=None, config_record: Optional[dict] = None) -> TrainResult:
    """Run training; returns the final checkpoint and the per-step metric rows.

    ``max_steps`` stops early (for smoke tests) without changing the lr schedule.
    """
    cfg.validate()
    data = TrainData(train_scenes, num_classes)
    per_epoch = steps_per_epoch(cfg, data)
    total_steps = cfg.epochs * per_epoch
    record = config_record if config_record is not None else cfg.to_dict()

    if resume is None:
        student = init_params(num_classes, cfg.seed, np.float32)
        teacher = student.copy("teacher")
        momentum_state: dict = {}
        start = 0
    else:
        student = resume.student.copy("student")
        teacher = resume.teacher.copy("teacher")
        momentum_state = {k: v.copy() for k, v in resume.momentum.items()}
        start = resume.step
    spec = LossSpec(cfg.lam, cfg.ld_normalize, cfg.freeze_encoder)
    rows, traces = [], []
    step = start
    stop = total_steps if max_steps is None else min(total_steps, start + max_steps)
    while step < stop:
        epoch, k = divmod(step, per_epoch)
        sampler = _rng(cfg.seed, _SAMPLE, epoch)
        clean_order = sampler.integers(0, data.n_clean, size=(per_epoch, cfg.batch_clean))
        semi = cfg.mode == "semi" and step >= cfg.burnin_steps
        deg_idx = None
        if semi:
            perm = sampler.permutation(data.n_degraded)
            deg_idx = perm[k * cfg.batch_degraded : (k + 1) * cfg.batch_degraded]
        batch = build_step_batch(cfg, data, teacher, epoch, k, clean_order[k], deg_idx)
        lr = poly_lr(cfg.lr, step, total_steps)
        try:
            report, grads = forward_backward(student, batch, spec)
        except NonFiniteError as exc:
            trace = StepTrace(step, epoch, None, False, lr)
            raise TrainingAborted(f"step {step}: {exc}", trace) from exc
        sgd_step(student, grads, momentum_state, lr, cfg.head_lr_mult, cfg.freeze_encoder, cfg.momentum)
        ema_update(teacher, student, cfg.gamma)
        traces.append(StepTrace(step, epoch, report, True, lr))
        row = dict(step=step, epoch=epoch, l_c=report.l_c, l_d=report.l_d, total=report.total,
                   confident_fraction=report.confident_fraction, lr=lr, val_miou=None)
        step += 1
        if step % per_epoch == 0:
            if val_scenes:
                row["val_miou"] = miou_mdice(evaluate_scenes(teacher, val_scenes, num_classes))[0]
            log.info("epoch %d step %d l_c=%.4f l_d=%.4f conf=%.3f val_miou=%s", epoch, step,
                     report.l_c, report.l_d, report.confident_fraction, row["val_miou"])
            if on_epoch is not None:
                on_epoch(epoch, row)
        rows.append(row)

    ckpt = Checkpoint(student, teacher, momentum_state, step=step, epoch=step // per_epoch, config=record)
    return TrainResult(ckpt, rows, traces, data)

"""Three-row ablation: clean-only, clean + degraded, clean + degraded + TTA."""
from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .datagen import Scene
from .evaluate import TTAPolicy, evaluate_scenes, miou_mdice
from .trainer import TrainConfig, train

ROW_NAMES = ("clean_only", "clean+degraded", "clean+degraded+tta")
ABLATION_HEADER = ["setting", "miou", "mdice", "status"]


@dataclass
class AblationRow:
    setting: str
    miou: Optional[float] = None
    mdice: Optional[float] = None
    error: Optional[str] = None
    exception: Optional[BaseException] = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationTable:
    rows: list[AblationRow]

    def row(self, setting: str) -> AblationRow:
        return next(r for r in self.rows if r.setting == setting)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in self.rows:
            w.writerow([r.setting, "" if r.miou is None else repr(r.miou),
                        "" if r.mdice is None else repr(r.mdice), "ok" if r.ok else f"failed: {r.error}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'setting':<22}{'mIoU':>8}{'mDice':>8}"]
        for r in self.rows:
            if r.ok:
                lines.append(f"{r.setting:<22}{r.miou:>8.4f}{r.mdice:>8.4f}")
            else:
                lines.append(f"{r.setting:<22}  FAILED: {r.error}")
        return "\n".join(lines) + "\n"


def _trained(cfg: TrainConfig, mode: str, train_scenes, num_classes, val_scenes, ckpt_dir, log_rows) -> Checkpoint:
    path = None if ckpt_dir is None else os.path.join(ckpt_dir, f"{mode}.wpsckpt")
    if path is not None and os.path.exists(path):
        return load_checkpoint(path)
    run_cfg = dataclasses.replace(cfg, mode=mode)
    result = train(run_cfg, train_scenes, num_classes, val_scenes)
    if log_rows is not None:
        log_rows(mode, result)
    if path is not None:
        save_checkpoint(result.checkpoint, path)
    return result.checkpoint


def ablate(cfg: TrainConfig, train_scenes: Sequence[Scene], test_scenes: Sequence[Scene], num_classes: int,
           tta: TTAPolicy = TTAPolicy(), val_scenes: Optional[Sequence[Scene]] = None,
           ckpt_dir: Optional[str] = None, use_student: bool = False,
           on_train: Optional[Callable] = None) -> AblationTable:
    """Train (or reload from ``ckpt_dir``) both modes and score the degraded test images.

    A failure in one row is recorded in that row; the others still run.
    """
    rows = {name: AblationRow(name) for name in ROW_NAMES}
    plan = [("clean_only", ["clean_only"]), ("semi", ["clean+degraded", "clean+degraded+tta"])]
    for mode, names in plan:
        try:
            ckpt = _trained(cfg, mode, train_scenes, num_classes, val_scenes, ckpt_dir, on_train)
        except Exception as exc:  # noqa: BLE001 - reported per row
            for n in names:
                rows[n].error, rows[n].exception = f"{type(exc).__name__}: {exc}", exc
            continue
        params = ckpt.student if use_student else ckpt.teacher
        for n in names:
            try:
                cm = evaluate_scenes(params, test_scenes, num_classes, tta=tta if n.endswith("tta") else None)
                rows[n].miou, rows[n].mdice, _ = miou_mdice(cm)
            except Exception as exc:  # noqa: BLE001
                rows[n].error, rows[n].exception = f"{type(exc).__name__}: {exc}", exc
    return AblationTable([rows[n] for n in ROW_NAMES])

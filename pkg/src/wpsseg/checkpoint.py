"""Checkpoint file: magic ``WPSCKPT1``, version, a JSON directory, then raw f32 payloads.

Layout::

    8s   magic
    u32  version
    u32  directory length in bytes
    ...  directory (UTF-8 JSON): config, step, epoch, tensors[{name, shape, offset, nbytes}]
    ...  payloads, little-endian float32, offsets relative to the payload start
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ParamSet

CKPT_MAGIC = b"WPSCKPT1"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_GROUPS = ("student", "teacher", "momentum")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    student: ParamSet
    teacher: ParamSet
    momentum: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    config: dict = field(default_factory=dict)

    def tensors(self):
        for name, t in self.student.items():
            yield f"student/{name}", t
        for name, t in self.teacher.items():
            yield f"teacher/{name}", t
        for name, t in sorted(self.momentum.items()):
            yield f"momentum/{name}", t


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries, payloads = [], []
    offset = 0
    for name, t in ckpt.tensors():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    directory = json.dumps(
        {"config": ckpt.config, "step": ckpt.step, "epoch": ckpt.epoch, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(directory)))
        fh.write(directory)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated header: expected {_PREFIX.size} bytes, got {len(data)}")
    magic, version, dir_len = _PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at byte offset 0, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + dir_len
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated directory: expected {start} bytes, got {len(data)}")
    try:
        directory = json.loads(data[_PREFIX.size : start])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt directory: {exc}") from None
    entries = directory["tensors"]
    expected = start + sum(e["nbytes"] for e in entries)
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, got {len(data)}")
    groups = {g: {} for g in _GROUPS}
    for e in entries:
        group, name = e["name"].split("/", 1)
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, "<f4", count, start + e["offset"]).reshape(e["shape"]).astype(np.float32)
        groups[group][name] = arr
    return Checkpoint(
        student=ParamSet(groups["student"], "student"),
        teacher=ParamSet(groups["teacher"], "teacher"),
        momentum=groups["momentum"],
        step=int(directory["step"]),
        epoch=int(directory["epoch"]),
        config=directory["config"],
    )

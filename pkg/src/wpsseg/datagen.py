"""Procedural paired clean/degraded segmentation scenes and the shard file format.

Every scene is a pure function of ``(seed, height, width, num_classes)``.  The
layout is a sky band over a ground band with one to four convex polygons or
ellipses pasted on top; each region gets a class colour, a small per-region
colour offset and smooth texture noise.  The degraded image is rendered from the
clean one by :func:`degrade`, so both share the label map exactly.
"""
from __future__ import annotations

import colorsys
import enum
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

IGNORE_INDEX = 255
SHARD_MAGIC = b"WPSSHARD"
SHARD_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")
_RECORD_TAIL = struct.Struct("<BdQ")

FOG_GRAY = 0.7
RAIN_ANGLE_DEG = 80.0
RAIN_INTENSITY = 0.25
SNOW_INTENSITY = 0.6

# Hand-picked colours for the first ten classes, then golden-ratio hues.
_BASE_PALETTE = [
    (0.55, 0.75, 0.95),  # sky
    (0.45, 0.35, 0.25),  # ground
    (0.15, 0.55, 0.15),  # tree
    (0.75, 0.25, 0.20),  # building
    (0.85, 0.80, 0.30),  # structure
    (0.35, 0.30, 0.70),  # stone
    (0.20, 0.70, 0.65),
    (0.80, 0.45, 0.75),
    (0.95, 0.60, 0.15),
    (0.40, 0.40, 0.40),
]


class WeatherKind(enum.IntEnum):
    RAIN = 0
    FOG = 1
    SNOW = 2


class DatagenError(ValueError):
    pass


class ShardFormatError(ValueError):
    pass


class MagicMismatchError(ShardFormatError):
    pass


class TruncatedShardError(ShardFormatError):
    pass


@dataclass(eq=False)
class Scene:
    clean: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8
    degraded: np.ndarray  # (3, H, W) float32 in [0, 1]
    weather: WeatherKind
    severity: float
    seed: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            _bits_equal(self.clean, other.clean)
            and _bits_equal(self.label, other.label)
            and _bits_equal(self.degraded, other.degraded)
            and self.weather == other.weather
            and struct.pack("<d", self.severity) == struct.pack("<d", other.severity)
            and self.seed == other.seed
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.label.shape


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def class_color(k: int) -> np.ndarray:
    if k < len(_BASE_PALETTE):
        return np.array(_BASE_PALETTE[k])
    hue = (k * 0.618033988749895) % 1.0
    value = 0.5 + 0.4 * ((k * 7) % 5) / 4
    return np.array(colorsys.hsv_to_rgb(hue, 0.7, value))


def _convex_polygon_mask(rng, yy, xx, cy, cx, radius):
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = radius * rng.uniform(0.6, 1.0, n)
    py = cy + radii * np.sin(angles)
    px = cx + radii * np.cos(angles)
    inside = np.ones(yy.shape, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        # Counter-clockwise vertex order in (x, y) means the interior lies to the left.
        cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
        inside &= cross >= 0
    return inside


def _ellipse_mask(rng, yy, xx, cy, cx, radius):
    ry = radius * rng.uniform(0.5, 1.0)
    rx = radius * rng.uniform(0.5, 1.0)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _layout(rng, height, width, num_classes):
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    horizon = height * rng.uniform(0.3, 0.5)
    slope = rng.uniform(-0.25, 0.25)
    wave_amp = rng.uniform(0, 0.06) * height
    wave_freq = rng.uniform(0.5, 2.0) * 2 * np.pi / width
    boundary = horizon + slope * (xx - width / 2) + wave_amp * np.sin(wave_freq * xx)
    label = np.where(yy < boundary, 0, 1).astype(np.uint8)
    object_classes = np.arange(2, num_classes) if num_classes > 2 else np.arange(num_classes)
    for _ in range(int(rng.integers(1, 5))):
        k = int(rng.choice(object_classes))
        radius = min(height, width) * rng.uniform(0.12, 0.3)
        cy = rng.uniform(0.15, 0.95) * height
        cx = rng.uniform(0.05, 0.95) * width
        if rng.random() < 0.5:
            region = _convex_polygon_mask(rng, yy, xx, cy, cx, radius)
        else:
            region = _ellipse_mask(rng, yy, xx, cy, cx, radius)
        label[region] = k
    return label


def _render(rng, label, num_classes):
    height, width = label.shape
    img = np.zeros((3, height, width))
    for k in range(num_classes):
        sel = label == k
        if not sel.any():
            continue
        color = np.clip(class_color(k) + rng.uniform(-0.06, 0.06, 3), 0, 1)
        img[:, sel] = color[:, None]
    smooth = gaussian_filter(rng.standard_normal((3, height, width)), sigma=(0, 2, 2))
    smooth /= max(np.abs(smooth).max(), 1e-12)
    img += 0.05 * smooth + 0.02 * rng.standard_normal((3, height, width))
    return np.clip(img, 0.0, 1.0)


def generate_scene(seed: int, height: int, width: int, num_classes: int) -> Scene:
    if height < 16 or width < 16:
        raise DatagenError(f"height and width must be >= 16, got {height}x{width}")
    if not 2 <= num_classes <= 32:
        raise DatagenError(f"num_classes must be in [2, 32], got {num_classes}")
    seed = int(seed)
    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    label = _layout(layout_rng, height, width, num_classes)
    clean = _render(layout_rng, label, num_classes).astype(np.float32)
    weather_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    weather = WeatherKind(int(weather_rng.integers(0, 3)))
    severity = float(weather_rng.uniform(0.25, 1.0))
    degraded = degrade(clean, weather, severity, seed)
    return Scene(clean, label, degraded, weather, severity, seed)


def _fog(img, a):
    return (1.0 - a) * img + a * FOG_GRAY


def _rain_layer(rng, n, height, width):
    coverage = np.zeros((height + 1, width + 1))
    theta = np.deg2rad(RAIN_ANGLE_DEG)
    dx, dy = np.cos(theta), np.sin(theta)
    for _ in range(n):
        length = rng.uniform(5, 12)
        x0 = rng.uniform(-2, width)
        y0 = rng.uniform(-length, height)
        t = np.arange(0, length, 0.5)
        x = x0 + t * dx
        y = y0 + t * dy
        ok = (x >= 0) & (x < width - 1) & (y >= 0) & (y < height - 1)
        x, y = x[ok], y[ok]
        ix, iy = np.floor(x).astype(int), np.floor(y).astype(int)
        fx, fy = x - ix, y - iy
        streak = np.zeros_like(coverage)
        w = 0.5
        np.add.at(streak, (iy, ix), w * (1 - fx) * (1 - fy))
        np.add.at(streak, (iy, ix + 1), w * fx * (1 - fy))
        np.add.at(streak, (iy + 1, ix), w * (1 - fx) * fy)
        np.add.at(streak, (iy + 1, ix + 1), w * fx * fy)
        coverage = np.maximum(coverage, np.minimum(streak, 1.0))
    return coverage[:height, :width]


def degrade(clean: np.ndarray, kind: WeatherKind, severity: float, seed: int) -> np.ndarray:
    """Render a weather effect on ``clean``; output has the same shape and dtype."""
    if not 0.0 <= severity <= 1.0:
        raise DatagenError(f"severity must be in [0, 1], got {severity}")
    kind = WeatherKind(kind)
    img = np.asarray(clean, dtype=np.float64)
    _, height, width = img.shape
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2, int(kind)]))
    if kind is WeatherKind.FOG:
        out = _fog(img, 0.8 * severity)
    elif kind is WeatherKind.RAIN:
        n = int(round(200 * severity))
        out = img + RAIN_INTENSITY * _rain_layer(rng, n, height, width)[None]
    else:
        out = _fog(img, 0.3 * severity)
        speckle = np.zeros((height, width))
        for _ in range(int(round(300 * severity))):
            size = int(rng.integers(1, 3))
            y = int(rng.integers(0, height - size + 1))
            x = int(rng.integers(0, width - size + 1))
            speckle[y : y + size, x : x + size] = SNOW_INTENSITY
        out = out + speckle[None]
    return np.clip(out, 0.0, 1.0).astype(clean.dtype)


def split_seeds(base_seed: int, split: int, n: int) -> list[int]:
    state = np.random.SeedSequence([int(base_seed), int(split)]).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


def generate_split(n: int, base_seed: int, split: int, size: int = 64, num_classes: int = 6) -> list[Scene]:
    return [generate_scene(s, size, size, num_classes) for s in split_seeds(base_seed, split, n)]


# --- shard I/O -----------------------------------------------------------------


def record_size(height: int, width: int) -> int:
    return 2 * 3 * height * width * 4 + height * width + _RECORD_TAIL.size


def write_shard(scenes: Sequence[Scene], path, num_classes: int) -> None:
    if not scenes:
        raise ShardFormatError("cannot write an empty shard")
    height, width = scenes[0].shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(scenes), num_classes, height, width))
        for sc in scenes:
            if sc.shape != (height, width):
                raise ShardFormatError(f"scene {sc.seed} has shape {sc.shape}, expected {(height, width)}")
            if not np.all((sc.label < num_classes) | (sc.label == IGNORE_INDEX)):
                raise ShardFormatError(f"scene {sc.seed} has labels >= {num_classes}")
            fh.write(np.ascontiguousarray(sc.clean, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(sc.label, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(sc.degraded, dtype="<f4").tobytes())
            fh.write(_RECORD_TAIL.pack(int(sc.weather), sc.severity, sc.seed))


def read_shard_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> dict:
    if len(raw) < _HEADER.size:
        raise TruncatedShardError(
            f"{path}: truncated header at byte offset {len(raw)}: expected {_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, count, num_classes, height, width = _HEADER.unpack(raw[: _HEADER.size])
    if magic != SHARD_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r} at byte offset 0, expected {SHARD_MAGIC!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: unsupported shard version {version} at byte offset 8")
    return dict(count=count, num_classes=num_classes, height=height, width=width)


def read_shard(path) -> tuple[list[Scene], int]:
    """Returns ``(scenes, num_classes)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    head = _parse_header(data, path)
    count, height, width = head["count"], head["height"], head["width"]
    rec = record_size(height, width)
    expected = _HEADER.size + count * rec
    if len(data) != expected:
        complete = max(len(data) - _HEADER.size, 0) // rec
        offset = _HEADER.size + complete * rec
        kind = "truncated" if len(data) < expected else "oversized"
        raise TruncatedShardError(
            f"{path}: {kind} shard, expected {expected} bytes, got {len(data)}; "
            f"record {complete} incomplete at byte offset {offset}"
        )
    n_img = 3 * height * width
    scenes = []
    off = _HEADER.size
    for _ in range(count):
        clean = np.frombuffer(data, "<f4", n_img, off).reshape(3, height, width).astype(np.float32)
        off += 4 * n_img
        label = np.frombuffer(data, np.uint8, height * width, off).reshape(height, width).copy()
        off += height * width
        degraded = np.frombuffer(data, "<f4", n_img, off).reshape(3, height, width).astype(np.float32)
        off += 4 * n_img
        weather, severity, seed = _RECORD_TAIL.unpack_from(data, off)
        off += _RECORD_TAIL.size
        scenes.append(Scene(clean, label, degraded, WeatherKind(weather), severity, seed))
    return scenes, head["num_classes"]


def shard_paths(out_dir) -> dict[str, str]:
    return {name: os.path.join(out_dir, f"{name}.wps") for name in ("train", "val", "test")}

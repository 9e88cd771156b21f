"""Skeleton sequence -> color action image.

Rows are joints (already in layout order, actors stacked), columns are
frames, and the R, G, B planes carry quantized x, y, z.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from actionimage import png
from actionimage.skeleton import ConfigError, SkeletonSequence, merge_actors

# motionless sequences carry no signal
DEGENERATE_RANGE = 1e-9


@dataclass(frozen=True, eq=False)
class ActionImage:
    pixels: np.ndarray  # (A*J, N, 3) uint8
    degenerate: bool = False

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3 or p.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 pixels, got {p.shape} {p.dtype}")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ActionImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None


@dataclass(frozen=True)
class GlobalStats:
    """Min/max over every coordinate of a training split."""

    c_min: float
    c_max: float

    def __post_init__(self):
        if not (np.isfinite(self.c_min) and np.isfinite(self.c_max)):
            raise ConfigError("global stats must be finite")
        if self.c_min > self.c_max:
            raise ConfigError(f"c_min {self.c_min} > c_max {self.c_max}")

    def to_json(self) -> dict:
        return {"c_min": self.c_min, "c_max": self.c_max}

    @classmethod
    def from_json(cls, d: dict) -> GlobalStats:
        try:
            return cls(float(d["c_min"]), float(d["c_max"]))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed stats: {e}") from e


def _rows_by_frames(seq: SkeletonSequence) -> np.ndarray:
    # (N, 1, J, 3) -> (J, N, 3)
    return merge_actors(seq).coords[:, 0].transpose(1, 0, 2)


def _quantize(ratio: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(255.0 * ratio), 0, 255).astype(np.uint8)


def encode_proposed(seq: SkeletonSequence) -> ActionImage:
    """Per-sequence normalization: subtract each channel's own minimum and
    divide all three channels by the largest channel range.

    A sequence whose largest range is below ``DEGENERATE_RANGE`` becomes an
    all-zero image with ``degenerate=True``.
    """
    c = _rows_by_frames(seq)
    lo = c.min(axis=(0, 1))
    span = (c.max(axis=(0, 1)) - lo).max()
    if span < DEGENERATE_RANGE:
        warnings.warn(f"{seq.source_id or 'sequence'}: no motion, encoded as zeros", stacklevel=2)
        return ActionImage(np.zeros(c.shape, dtype=np.uint8), degenerate=True)
    return ActionImage(_quantize((c - lo) / span))


def encode_baseline(seq: SkeletonSequence, stats: GlobalStats) -> ActionImage:
    """Dataset-wide normalization with one (min, max) pair for every channel.

    Coordinates outside the training range are clamped into it first.
    """
    if stats.c_max == stats.c_min:
        raise ConfigError("baseline mapping needs c_max > c_min")
    c = np.clip(_rows_by_frames(seq), stats.c_min, stats.c_max)
    return ActionImage(_quantize((c - stats.c_min) / (stats.c_max - stats.c_min)))


def compute_global_stats(sequences) -> GlobalStats:
    lo, hi = np.inf, -np.inf
    count = 0
    for s in sequences:
        lo = min(lo, float(s.coords.min()))
        hi = max(hi, float(s.coords.max()))
        count += 1
    if count == 0:
        raise ValueError("cannot compute global stats of an empty training set")
    return GlobalStats(lo, hi)


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resample of an (H, W, C) array, values unscaled."""
    h_out, w_out = size
    if h_out < 1 or w_out < 1:
        raise ValueError(f"bad target size {size}")
    x = np.asarray(x, dtype=np.float64)
    y0, y1, fy = _axis_weights(x.shape[0], h_out)
    x0, x1, fx = _axis_weights(x.shape[1], w_out)
    fy = fy[:, None, None]
    rows = x[y0] * (1.0 - fy) + x[y1] * fy
    fx = fx[None, :, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def resize(img, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resample to ``size`` = (H', W'), scaled to [0, 1]."""
    pixels = img.pixels if isinstance(img, ActionImage) else np.asarray(img)
    return bilinear(pixels, size) / 255.0


def export_png(img: ActionImage, path) -> None:
    path = Path(path)
    try:
        path.write_bytes(png.encode(img.pixels))
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def import_png(path) -> ActionImage:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    try:
        return ActionImage(png.decode(blob))
    except png.PNGError as e:
        raise png.PNGError(f"{path}: {e}") from e

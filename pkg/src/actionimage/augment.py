"""Rotation, Gaussian jitter and temporal cropping of skeleton sequences."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from actionimage.skeleton import ConfigError, SkeletonSequence

MAX_ANGLE = 30.0
MIN_CROP = 0.7


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_range_deg: float = 30.0
    noise_mean: float = 0.0
    noise_sigma: float = 0.01
    crop_ratio_range: tuple[float, float] = (0.7, 1.0)
    multiplicity: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_ratio_range", tuple(float(r) for r in self.crop_ratio_range))
        lo, hi = self.crop_ratio_range
        if not 0 <= self.rotation_range_deg <= MAX_ANGLE:
            raise ConfigError(f"rotation range must lie in [0, {MAX_ANGLE}] degrees")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if not MIN_CROP <= lo <= hi <= 1.0:
            raise ConfigError(f"crop ratio range must lie within [{MIN_CROP}, 1], got {(lo, hi)}")
        if self.multiplicity < 0:
            raise ConfigError("multiplicity must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["crop_ratio_range"] = list(self.crop_ratio_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> AugmentationSpec:
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad augmentation spec: {e}") from e


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rz @ Ry @ Rx for column vectors, right-handed."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate(seq: SkeletonSequence, angles_deg, *, limit: float = MAX_ANGLE) -> SkeletonSequence:
    """Rotate every joint about the centroid of all joints in the sequence."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    if angles.shape != (3,) or np.any(np.abs(angles) > limit):
        raise ConfigError(f"rotation angles must be 3 values within +-{limit} deg, got {angles_deg}")
    center = seq.coords.reshape(-1, 3).mean(axis=0)
    r = rotation_matrix(angles)
    return seq.with_coords((seq.coords - center) @ r.T + center)


def add_noise(seq: SkeletonSequence, mean: float = 0.0, sigma: float = 0.01, seed=0) -> SkeletonSequence:
    """``seed`` may be an int or a ``numpy.random.Generator``."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0 and mean == 0:
        return seq
    rng = np.random.default_rng(seed)
    return seq.with_coords(seq.coords + rng.normal(mean, sigma, size=seq.coords.shape))


def crop_window(n: int, ratio: float, start_frac: float) -> tuple[int, int]:
    """(start, length) of the kept frame window."""
    # rounding absorbs float noise such as 0.7 * 10 = 7.000000000000001
    length = max(1, min(n, math.ceil(round(ratio * n, 9))))
    start = math.floor(min(max(start_frac, 0.0), 1.0) * (n - length))
    return min(start, n - length), length


def temporal_crop(seq: SkeletonSequence, ratio: float, start_frac: float = 0.0) -> SkeletonSequence:
    if not MIN_CROP <= ratio <= 1.0:
        raise ConfigError(f"crop ratio must lie in [{MIN_CROP}, 1], got {ratio}")
    start, length = crop_window(seq.frame_count, ratio, start_frac)
    return seq.with_coords(seq.coords[start:start + length])


def augment_once(seq: SkeletonSequence, spec: AugmentationSpec, rng: np.random.Generator) -> SkeletonSequence:
    r = spec.rotation_range_deg
    angles = rng.uniform(-r, r, size=3)
    ratio = rng.uniform(*spec.crop_ratio_range)
    start_frac = rng.uniform(0.0, 1.0)
    out = rotate(seq, angles)
    out = add_noise(out, spec.noise_mean, spec.noise_sigma, rng)
    return temporal_crop(out, ratio, start_frac)


def expand(sequences, spec: AugmentationSpec, *, split: str = "train") -> list[SkeletonSequence]:
    """Originals followed, per sequence, by ``spec.multiplicity`` augmented copies.

    Copy ``c`` of sequence ``i`` draws from its own stream seeded by
    ``(spec.seed, i, c)``, so the result does not depend on evaluation order.
    """
    if split != "train":
        raise ConfigError(f"augmentation is only applied to the train split, not {split!r}")
    out = []
    for i, seq in enumerate(sequences):
        out.append(seq)
        for c in range(spec.multiplicity):
            rng = np.random.default_rng([spec.seed, i, c])
            out.append(augment_once(seq, spec, rng))
    return out

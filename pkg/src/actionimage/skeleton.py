"""Skeleton sequences, five-part joint layouts, actor merging and channel masks.

A sequence is stored as one float64 array of shape ``(N, A, J, 3)``:
frames, actors, joints, (x, y, z). Values are read-only; every operation
returns a new sequence.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration (layout, mask, stats, run config)."""


class UnsupportedInputError(ValueError):
    """Input is well formed but outside what the pipeline handles."""


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    coords: np.ndarray
    label: int | None = None
    source_id: str = ""
    actor_ids: tuple[int, ...] = ()

    def __post_init__(self):
        c = np.array(self.coords, dtype=np.float64)
        if c.ndim != 4 or c.shape[-1] != 3:
            raise ValueError(f"coords must have shape (N, A, J, 3), got {c.shape}")
        if c.shape[0] < 1:
            raise ValueError("a sequence needs at least one frame")
        if c.shape[1] < 1 or c.shape[2] < 1:
            raise ValueError(f"empty actor or joint axis: {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coordinates must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)
        ids = tuple(int(i) for i in self.actor_ids) or tuple(range(c.shape[1]))
        if len(ids) != c.shape[1]:
            raise ValueError(f"{len(ids)} actor ids for {c.shape[1]} actors")
        object.__setattr__(self, "actor_ids", ids)

    @property
    def frame_count(self) -> int:
        return self.coords.shape[0]

    @property
    def actor_count(self) -> int:
        return self.coords.shape[1]

    @property
    def joint_count(self) -> int:
        return self.coords.shape[2]

    def with_coords(self, coords) -> SkeletonSequence:
        """Same metadata, new coordinates."""
        return replace(self, coords=coords)

    def __eq__(self, other):
        if not isinstance(other, SkeletonSequence):
            return NotImplemented
        return (
            self.label == other.label
            and self.source_id == other.source_id
            and self.actor_ids == other.actor_ids
            and self.coords.shape == other.coords.shape
            and bool(np.array_equal(self.coords, other.coords))
        )

    __hash__ = None


@dataclass(frozen=True)
class BodyPartLayout:
    """Ordered body parts, each an ordered list of 0-based raw joint indices."""

    parts: tuple[tuple[str, tuple[int, ...]], ...]
    permutation: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parts = tuple((str(name), tuple(int(j) for j in joints)) for name, joints in self.parts)
        object.__setattr__(self, "parts", parts)
        perm = np.array([j for _, joints in parts for j in joints], dtype=np.int64)
        n = len(perm)
        if n == 0 or sorted(perm.tolist()) != list(range(n)):
            raise ConfigError(
                f"layout is not a permutation of 0..{n - 1}: {perm.tolist()}"
            )
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)

    @property
    def joint_count(self) -> int:
        return len(self.permutation)

    def inverse(self) -> BodyPartLayout:
        inv = np.argsort(self.permutation)
        return BodyPartLayout((("inverse", tuple(inv.tolist())),))

    @classmethod
    def from_json(cls, source) -> BodyPartLayout:
        """Load ``{"parts": [{"name": str, "joints": [1-based ints]}]}``.

        ``source`` is a path or an already-decoded dict.
        """
        if isinstance(source, (str, Path)):
            try:
                source = json.loads(Path(source).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read layout {source}: {e}") from e
        try:
            parts = [(p["name"], [int(j) - 1 for j in p["joints"]]) for p in source["parts"]]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"malformed layout: {e}") from e
        return cls(tuple((n, tuple(j)) for n, j in parts))

    def to_json(self) -> dict:
        return {"parts": [{"name": n, "joints": [j + 1 for j in js]} for n, js in self.parts]}


def _one_based(parts):
    return BodyPartLayout(tuple((n, tuple(j - 1 for j in js)) for n, js in parts))


# Kinect v2 / NTU RGB+D numbering, chains follow physical connections.
NTU25_LAYOUT = _one_based((
    ("left_arm", (5, 6, 7, 8, 22, 23)),
    ("right_arm", (9, 10, 11, 12, 24, 25)),
    ("trunk", (4, 3, 21, 2, 1)),
    ("left_leg", (13, 14, 15, 16)),
    ("right_leg", (17, 18, 19, 20)),
))

# Kinect v1 as used by UTD-MHAD: 1 head, 2 shoulder center, 3 spine, 4 hip center.
KINECT20_LAYOUT = _one_based((
    ("left_arm", (5, 6, 7, 8)),
    ("right_arm", (9, 10, 11, 12)),
    ("trunk", (1, 2, 3, 4)),
    ("left_leg", (13, 14, 15, 16)),
    ("right_leg", (17, 18, 19, 20)),
))


def default_layout(joint_count: int) -> BodyPartLayout:
    if joint_count == 25:
        return NTU25_LAYOUT
    if joint_count == 20:
        return KINECT20_LAYOUT
    raise ConfigError(
        f"no built-in layout for {joint_count} joints; supply a layout file"
    )


@dataclass(frozen=True)
class ChannelMask:
    keep_x: bool = True
    keep_y: bool = True
    keep_z: bool = True

    def __post_init__(self):
        if not (self.keep_x or self.keep_y or self.keep_z):
            raise ConfigError("channel mask must keep at least one channel")

    @classmethod
    def parse(cls, text: str) -> ChannelMask:
        """``"xyz"``, ``"xy"``, ``"z"``, ... (case and dashes ignored)."""
        t = text.lower().replace("-", "")
        if not t or set(t) - set("xyz"):
            raise ConfigError(f"bad channel mask {text!r}")
        return cls("x" in t, "y" in t, "z" in t)

    def __str__(self):
        return "".join(c for c, k in zip("xyz", (self.keep_x, self.keep_y, self.keep_z)) if k)

    @property
    def keep(self) -> np.ndarray:
        return np.array([self.keep_x, self.keep_y, self.keep_z])


def reorder_joints(seq: SkeletonSequence, layout: BodyPartLayout) -> SkeletonSequence:
    if layout.joint_count != seq.joint_count:
        raise ConfigError(
            f"layout covers {layout.joint_count} joints but sequence has {seq.joint_count}"
        )
    return seq.with_coords(seq.coords[:, :, layout.permutation, :])


def merge_actors(seq: SkeletonSequence) -> SkeletonSequence:
    """Stack actors along the joint axis: actor 0's joints first."""
    if seq.actor_count > 2:
        raise UnsupportedInputError(
            f"at most two actors are supported, got {seq.actor_count}"
        )
    if seq.actor_count == 1:
        return seq
    n, a, j, _ = seq.coords.shape
    return replace(seq, coords=seq.coords.reshape(n, 1, a * j, 3), actor_ids=(seq.actor_ids[0],))


def split_actors(seq: SkeletonSequence, actor_count: int, actor_ids=()) -> SkeletonSequence:
    """Inverse of :func:`merge_actors`."""
    if seq.actor_count != 1 or seq.joint_count % actor_count:
        raise ValueError(
            f"cannot split {seq.actor_count} actor(s) x {seq.joint_count} joints into {actor_count}"
        )
    n = seq.frame_count
    coords = seq.coords.reshape(n, actor_count, seq.joint_count // actor_count, 3)
    return replace(seq, coords=coords, actor_ids=tuple(actor_ids))


def mask_channels(seq: SkeletonSequence, mask: ChannelMask) -> SkeletonSequence:
    return seq.with_coords(np.where(mask.keep, seq.coords, 0.0))


def fill_missing_actor(frames: list[np.ndarray | None], joint_count: int, source: str = "") -> np.ndarray:
    """Stack per-frame actor arrays, zero-filling frames where the actor is absent."""
    missing = [i for i, f in enumerate(frames) if f is None]
    if missing:
        warnings.warn(
            f"{source}: actor missing in {len(missing)} frame(s), filled with zeros",
            stacklevel=2,
        )
    zero = np.zeros((joint_count, 3))
    return np.stack([zero if f is None else f for f in frames])

"""Skeleton action videos as translation-scale invariant color images,
classified by a multi-scale CNN with shared weights."""

from actionimage.skeleton import (
    BodyPartLayout,
    ChannelMask,
    ConfigError,
    SkeletonSequence,
    default_layout,
    mask_channels,
    merge_actors,
    reorder_joints,
)
from actionimage.mapping import (
    ActionImage,
    GlobalStats,
    compute_global_stats,
    encode_baseline,
    encode_proposed,
    resize,
)

__all__ = [
    "ActionImage",
    "BodyPartLayout",
    "ChannelMask",
    "ConfigError",
    "GlobalStats",
    "SkeletonSequence",
    "compute_global_stats",
    "default_layout",
    "encode_baseline",
    "encode_proposed",
    "mask_channels",
    "merge_actors",
    "reorder_joints",
    "resize",
]

__version__ = "0.1.0"

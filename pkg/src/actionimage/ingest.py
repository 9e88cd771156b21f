"""Reading skeleton files and generating synthetic labeled datasets."""
from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from actionimage.skeleton import (
    BodyPartLayout,
    ConfigError,
    SkeletonSequence,
    default_layout,
    fill_missing_actor,
)

NTU_JOINTS = 25
NTU_BODY_FIELDS = 10
NTU_JOINT_FIELDS = 12
MAX_ACTORS = 2


class ParseError(ValueError):
    def __init__(self, msg, line=None, source=""):
        where = f"{source}:" if source else ""
        where += f"line {line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line


def _text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return data.decode("utf-8")
    if isinstance(data, str):
        return data
    return _text(data.read())


class _Lines:
    def __init__(self, text, source):
        self.lines = text.splitlines()
        self.pos = 0
        self.source = source
        # trailing blank lines carry no records
        while self.lines and not self.lines[-1].strip():
            self.lines.pop()

    def next(self, expect: str) -> list[str]:
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file, expected {expect}", self.pos + 1, self.source)
        self.pos += 1
        return self.lines[self.pos - 1].split()

    def ints(self, n: int, expect: str) -> list[int]:
        toks = self.next(expect)
        if len(toks) < n:
            raise ParseError(f"expected {expect}, got {len(toks)} value(s)", self.pos, self.source)
        try:
            return [int(t) for t in toks[:n]]
        except ValueError:
            raise ParseError(f"non-integer token in {expect}: {toks[:n]}", self.pos, self.source) from None

    def floats(self, n: int, expect: str) -> list[float]:
        toks = self.next(expect)
        if len(toks) != n:
            raise ParseError(f"expected {n} values for {expect}, got {len(toks)}", self.pos, self.source)
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise ParseError(f"non-numeric token in {expect}", self.pos, self.source) from None
        if not all(math.isfinite(v) for v in vals[:3]):
            raise ParseError(f"non-finite coordinate in {expect}", self.pos, self.source)
        return vals


def _motion_energy(frames) -> float:
    present = [f for f in frames if f is not None]
    if len(present) < 2:
        return 0.0
    a = np.stack(present)
    return float(np.sum(np.diff(a, axis=0) ** 2))


def parse_ntu_skeleton(data, source_id: str = "", label: int | None = None) -> SkeletonSequence:
    """Parse the NTU RGB+D ``.skeleton`` text format.

    Only x, y, z of each joint are kept. Bodies are matched across frames by
    body id; if more than two ids occur, the two with the most frame-to-frame
    motion are kept. An actor missing from a frame is zero-filled.
    """
    lines = _Lines(_text(data), source_id)
    (n_frames,) = lines.ints(1, "frame count")
    if n_frames < 1:
        raise ParseError(f"frame count must be >= 1, got {n_frames}", 1, source_id)
    bodies: dict[int, list] = {}
    for t in range(n_frames):
        (n_bodies,) = lines.ints(1, f"body count of frame {t + 1}/{n_frames}")
        for _ in range(n_bodies):
            toks = lines.next("body metadata")
            if len(toks) != NTU_BODY_FIELDS:
                raise ParseError(
                    f"expected {NTU_BODY_FIELDS} body metadata values, got {len(toks)}",
                    lines.pos, source_id,
                )
            try:
                body_id = int(toks[0])
                [float(v) for v in toks[1:]]
            except ValueError:
                raise ParseError("non-numeric body metadata", lines.pos, source_id) from None
            (n_joints,) = lines.ints(1, "joint count")
            if n_joints != NTU_JOINTS:
                raise ParseError(f"expected {NTU_JOINTS} joints, got {n_joints}", lines.pos, source_id)
            joints = np.array([lines.floats(NTU_JOINT_FIELDS, "joint record")[:3] for _ in range(n_joints)])
            track = bodies.setdefault(body_id, [None] * n_frames)
            if track[t] is not None:
                raise ParseError(f"body id {body_id} appears twice in frame {t + 1}", lines.pos, source_id)
            track[t] = joints
    if lines.pos != len(lines.lines):
        raise ParseError(
            f"trailing data after the declared {n_frames} frame(s)", lines.pos + 1, source_id
        )
    if not bodies:
        raise ParseError("no bodies in any frame", None, source_id)

    ids = list(bodies)  # first-appearance order
    if len(ids) > MAX_ACTORS:
        ranked = sorted(ids, key=lambda i: -_motion_energy(bodies[i]))
        keep = set(ranked[:MAX_ACTORS])
        warnings.warn(
            f"{source_id or 'skeleton'}: {len(ids)} bodies, keeping the {MAX_ACTORS} most active",
            stacklevel=2,
        )
        ids = [i for i in ids if i in keep]
    actors = [fill_missing_actor(bodies[i], NTU_JOINTS, source_id) for i in ids]
    coords = np.stack(actors, axis=1)
    return SkeletonSequence(coords, label=label, source_id=source_id, actor_ids=tuple(ids))


def format_ntu_skeleton(seq: SkeletonSequence) -> str:
    """Write ``seq`` in the NTU text format; auxiliary fields are zero."""
    if seq.joint_count != NTU_JOINTS:
        raise ValueError(f"NTU format needs {NTU_JOINTS} joints, sequence has {seq.joint_count}")
    out = io.StringIO()
    out.write(f"{seq.frame_count}\n")
    aux = " ".join(["0"] * (NTU_JOINT_FIELDS - 3))
    meta = " ".join(["0"] * (NTU_BODY_FIELDS - 1))
    for frame in seq.coords:
        out.write(f"{seq.actor_count}\n")
        for body_id, joints in zip(seq.actor_ids, frame):
            out.write(f"{body_id} {meta}\n{NTU_JOINTS}\n")
            for x, y, z in joints:
                out.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {aux}\n")
    return out.getvalue()


def parse_jsonl(data, source_id: str = "") -> SkeletonSequence:
    """Header line ``{"label": int?, "joints": J, "actors": A}``, then one
    ``{"actors": [[[x, y, z] * J] * A]}`` object per frame."""
    rows = [(i + 1, ln) for i, ln in enumerate(_text(data).splitlines()) if ln.strip()]
    if not rows:
        raise ParseError("empty file", 1, source_id)
    try:
        header = json.loads(rows[0][1])
        n_joints, n_actors = int(header["joints"]), int(header["actors"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad header: {e}", rows[0][0], source_id) from None
    label = header.get("label")
    source_id = header.get("source_id", source_id)
    frames = []
    for lineno, ln in rows[1:]:
        try:
            actors = json.loads(ln)["actors"]
            arr = np.array(actors, dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad frame record: {e}", lineno, source_id) from None
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ParseError(f"frame must be actors x joints x 3, got shape {arr.shape}", lineno, source_id)
        if arr.shape[0] != n_actors:
            raise ParseError(f"expected {n_actors} actors, got {arr.shape[0]}", lineno, source_id)
        if arr.shape[1] != n_joints:
            raise ParseError(f"expected {n_joints} joints, got {arr.shape[1]}", lineno, source_id)
        if not np.all(np.isfinite(arr)):
            raise ParseError("non-finite coordinate", lineno, source_id)
        frames.append(arr)
    if not frames:
        raise ParseError("no frames after header", rows[0][0], source_id)
    return SkeletonSequence(
        np.stack(frames),
        label=None if label is None else int(label),
        source_id=source_id,
        actor_ids=tuple(header.get("actor_ids", ())),
    )


def format_jsonl(seq: SkeletonSequence) -> str:
    header = {"label": seq.label, "joints": seq.joint_count, "actors": seq.actor_count,
              "source_id": seq.source_id, "actor_ids": list(seq.actor_ids)}
    lines = [json.dumps(header)]
    # json writes float repr, which round-trips exactly
    lines += [json.dumps({"actors": frame.tolist()}) for frame in seq.coords]
    return "\n".join(lines) + "\n"


def load_sequence(path, label: int | None = None) -> SkeletonSequence:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read: {e}", None, str(path)) from e
    if path.suffix == ".jsonl":
        seq = parse_jsonl(raw, source_id=path.stem)
    else:
        seq = parse_ntu_skeleton(raw, source_id=path.stem)
    if label is not None and seq.label != label:
        seq = SkeletonSequence(seq.coords, label=label, source_id=seq.source_id, actor_ids=seq.actor_ids)
    return seq


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        m = len(self.class_names)
        seen = set()
        for e in self.entries:
            if not 0 <= e.label < m:
                raise ConfigError(f"label {e.label} of {e.path} outside [0, {m})")
            if e.split not in ("train", "test"):
                raise ConfigError(f"split of {e.path} must be train or test, got {e.split!r}")
            if e.path in seen:
                raise ConfigError(f"duplicate manifest path {e.path}")
            seen.add(e.path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def to_json(self) -> dict:
        return {"class_names": list(self.class_names), "entries": [asdict(e) for e in self.entries]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> DatasetManifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
            entries = [ManifestEntry(str(e["path"]), int(e["label"]), str(e["split"])) for e in d["entries"]]
            names = [str(n) for n in d["class_names"]]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise ConfigError(f"cannot load manifest {path}: {e}") from e
        return cls(entries, names, root=path.parent)


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 5
    sequences_per_class: int = 90
    test_per_class: int = 30
    joint_count: int = 25
    frame_range: tuple[int, int] = (40, 80)
    noise: float = 0.005
    scale_range: tuple[float, float] = (0.5, 2.0)
    translation_range: float = 5.0
    actor_count: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frame_range", tuple(int(v) for v in self.frame_range))
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        lo, hi = self.frame_range
        if self.class_count < 2:
            raise ConfigError("need at least 2 classes")
        if lo < 8 or hi < lo:
            raise ConfigError(f"frame range must satisfy 8 <= N_min <= N_max, got {self.frame_range}")
        if self.sequences_per_class < 1 or not 0 <= self.test_per_class <= self.sequences_per_class:
            raise ConfigError("bad per-class sequence counts")
        if self.noise < 0 or self.translation_range < 0:
            raise ConfigError("noise and translation range must be >= 0")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ConfigError(f"bad scale range {self.scale_range}")
        if self.actor_count not in (1, 2):
            raise ConfigError("actor count must be 1 or 2")
        default_layout(self.joint_count)

    def to_json(self) -> dict:
        d = asdict(self)
        d["frame_range"] = list(self.frame_range)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> SynthSpec:
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad synth spec: {e}") from e


# direction each part grows from the body center, for the rest pose
_PART_ANCHORS = {
    "left_arm": ((-0.2, 0.5, 0.0), (-1.0, -0.3, 0.0)),
    "right_arm": ((0.2, 0.5, 0.0), (1.0, -0.3, 0.0)),
    "trunk": ((0.0, 0.8, 0.0), (0.0, -1.0, 0.0)),
    "left_leg": ((-0.1, -0.1, 0.0), (0.0, -1.0, 0.0)),
    "right_leg": ((0.1, -0.1, 0.0), (0.0, -1.0, 0.0)),
}
_SPACING = 0.22
_DEPTH_DECAY = 0.8


def _rest_pose(layout: BodyPartLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rest coordinates, part index and chain depth for each raw joint."""
    j = layout.joint_count
    pose, part_of, depth = np.zeros((j, 3)), np.zeros(j, dtype=int), np.zeros(j)
    for p, (name, joints) in enumerate(layout.parts):
        origin, direction = _PART_ANCHORS.get(name, ((0.0, 0.0, 0.0), (0.0, -1.0, 0.0)))
        for d, raw in enumerate(joints):
            pose[raw] = np.add(origin, np.multiply(direction, _SPACING * d))
            part_of[raw], depth[raw] = p, d
    return pose, part_of, depth


def _class_signature(spec: SynthSpec, label: int, n_parts: int) -> dict:
    rng = np.random.default_rng([spec.seed, 7919, label])
    # cycles per sequence: well separated between classes
    base = 1.0 + 0.8 * label
    part_amp = 0.15 + 0.1 * rng.random((n_parts, 3))
    part_amp[label % n_parts] *= 4.0
    return {
        "freqs": base * np.array([1.0, 2.0, 3.0]),
        "harmonic_amp": np.array([1.0, 0.4, 0.15]),
        "phase": rng.uniform(0, 2 * np.pi, size=(3, n_parts, 3)),
        "part_amp": part_amp,
    }


def synth_sequence(spec: SynthSpec, label: int, index: int, scale=None, translation=None) -> SkeletonSequence:
    """One synthetic sequence; a pure function of (spec, label, index).

    ``scale`` / ``translation`` override the randomly injected global
    transform without changing any other random draw.
    """
    layout = default_layout(spec.joint_count)
    pose, part_of, depth = _rest_pose(layout)
    sig = _class_signature(spec, label, len(layout.parts))
    rng = np.random.default_rng([spec.seed, label, index])
    n = int(rng.integers(spec.frame_range[0], spec.frame_range[1] + 1))
    freq_jitter = rng.uniform(0.95, 1.05)
    shift = rng.uniform(0, 2 * np.pi)
    amp_jitter = rng.uniform(0.85, 1.15, size=(spec.actor_count, 1, 3))
    s = rng.uniform(*spec.scale_range)
    t = rng.uniform(-spec.translation_range, spec.translation_range, size=3)
    noise = rng.normal(0.0, spec.noise, size=(n, spec.actor_count, spec.joint_count, 3))

    time = np.linspace(0.0, 1.0, n)[:, None, None]
    amp = sig["part_amp"][part_of] * (_DEPTH_DECAY ** depth)[:, None]  # (J, 3)
    motion = np.zeros((n, spec.joint_count, 3))
    for h in range(3):
        phase = sig["phase"][h][part_of] + shift  # (J, 3)
        motion += sig["harmonic_amp"][h] * amp * np.sin(
            2 * np.pi * sig["freqs"][h] * freq_jitter * time + phase
        )
    actors = []
    for a in range(spec.actor_count):
        offset = np.array([1.2 * a, 0.0, 0.3 * a])
        actors.append(pose + offset + motion * amp_jitter[a] * (1.0 if a == 0 else -1.0))
    coords = np.stack(actors, axis=1) + noise
    s = s if scale is None else scale
    t = t if translation is None else np.asarray(translation, dtype=np.float64)
    return SkeletonSequence(
        coords * s + t,
        label=label,
        source_id=f"synth_c{label:02d}_{index:04d}",
        actor_ids=tuple(range(spec.actor_count)),
    )


def generate_synthetic(spec: SynthSpec) -> tuple[DatasetManifest, list[SkeletonSequence]]:
    """Balanced dataset with a stratified train/test split fixed by the seed.

    Manifest paths are ``<source_id>.jsonl``, relative to wherever the
    caller writes the sequences.
    """
    split_rng = np.random.default_rng([spec.seed, 104729])
    entries, sequences = [], []
    for label in range(spec.class_count):
        test_idx = set(split_rng.permutation(spec.sequences_per_class)[: spec.test_per_class].tolist())
        for i in range(spec.sequences_per_class):
            seq = synth_sequence(spec, label, i)
            sequences.append(seq)
            entries.append(ManifestEntry(f"{seq.source_id}.jsonl", label, "test" if i in test_idx else "train"))
    names = [f"class_{c}" for c in range(spec.class_count)]
    return DatasetManifest(entries, names), sequences

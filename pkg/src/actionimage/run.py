"""Reproducible runs: config, data preparation and the command bodies.

Every command validates the whole config before it touches the filesystem.
A run is a pure function of its config (including seeds).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from actionimage import png
from actionimage.augment import AugmentationSpec, expand
from actionimage.ingest import (
    DatasetManifest,
    ManifestEntry,
    ParseError,
    SynthSpec,
    format_jsonl,
    generate_synthetic,
    load_sequence,
)
from actionimage.mapping import (
    GlobalStats,
    compute_global_stats,
    encode_baseline,
    encode_proposed,
    export_png,
)
from actionimage.net import (
    MultiScaleNet,
    NetConfig,
    OptimizerConfig,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    train,
)
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

log = logging.getLogger("actionimage")

OUT_ENV = "ACTIONIMAGE_OUT"


class DataError(RuntimeError):
    """Input data could not be read or parsed."""


@dataclass(frozen=True)
class RunConfig:
    synth: SynthSpec | None = None
    manifest: str | None = None
    layout: str | None = None
    mapping: str = "proposed"
    stats: str | None = None
    mask: str = "xyz"
    augment: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(multiplicity=0))
    net: dict = field(default_factory=dict)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    out_dir: str = ""

    def __post_init__(self):
        if (self.synth is None) == (self.manifest is None):
            raise ConfigError("config needs exactly one data source: 'synth' or 'manifest'")
        if self.mapping not in ("proposed", "baseline"):
            raise ConfigError(f"mapping must be 'proposed' or 'baseline', got {self.mapping!r}")
        ChannelMask.parse(self.mask)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if "class_count" in self.net:
            raise ConfigError("net.class_count is derived from the dataset; remove it")
        # validates every net field against a placeholder class count
        NetConfig.from_json({**self.net, "class_count": 2})
        if not self.out_dir:
            object.__setattr__(self, "out_dir", os.environ.get(OUT_ENV, "runs/default"))

    @property
    def channel_mask(self) -> ChannelMask:
        return ChannelMask.parse(self.mask)

    def net_config(self, class_count: int) -> NetConfig:
        return NetConfig.from_json({**self.net, "class_count": class_count})

    def to_json(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_json() if self.synth else None
        d["augment"] = self.augment.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict, base: Path | None = None) -> RunConfig:
        """Relative paths are taken relative to ``base`` (the config's folder)."""
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if d.get("synth") is not None:
            d["synth"] = SynthSpec.from_json(d["synth"])
        if "augment" in d:
            d["augment"] = AugmentationSpec.from_json(d["augment"] or {"multiplicity": 0})
        if "optimizer" in d:
            try:
                d["optimizer"] = OptimizerConfig(**d["optimizer"])
            except TypeError as e:
                raise ConfigError(f"bad optimizer config: {e}") from e
        if base is not None:
            for key in ("manifest", "layout", "stats", "out_dir"):
                if d.get(key) and not Path(d[key]).is_absolute():
                    d[key] = str(base / d[key])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config: {e}") from e

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_json(d, base=path.parent)

    def override(self, **kw) -> RunConfig:
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


@dataclass
class Dataset:
    manifest: DatasetManifest
    sequences: list[SkeletonSequence | None]  # None where loading failed
    failures: list[tuple[str, str]] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[ManifestEntry, SkeletonSequence]]:
        return [(e, s) for e, s in zip(self.manifest.entries, self.sequences) if e.split == name and s is not None]


def load_dataset(cfg: RunConfig, manifest_path: str | None = None) -> Dataset:
    if manifest_path is None and cfg.synth is not None:
        manifest, seqs = generate_synthetic(cfg.synth)
        return Dataset(manifest, seqs)
    path = Path(manifest_path or cfg.manifest)
    if not path.is_file():
        raise DataError(f"dataset manifest not found: {path}")
    manifest = DatasetManifest.load(path)
    seqs, failures = [], []
    for e in manifest.entries:
        try:
            seqs.append(load_sequence(manifest.resolve(e), label=e.label))
        except ParseError as err:
            seqs.append(None)
            failures.append((e.path, str(err)))
    return Dataset(manifest, seqs, failures)


def resolve_layout(cfg: RunConfig, joint_count: int) -> BodyPartLayout:
    if cfg.layout:
        return BodyPartLayout.from_json(cfg.layout)
    return default_layout(joint_count)


def load_stats(cfg: RunConfig) -> GlobalStats | None:
    if cfg.mapping != "baseline":
        return None
    if not cfg.stats or not Path(cfg.stats).exists():
        raise ConfigError(
            "baseline mapping needs a stats file; run the 'stats' command first "
            "and point 'stats' at its output"
        )
    try:
        return GlobalStats.from_json(json.loads(Path(cfg.stats).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read stats {cfg.stats}: {e}") from e


def arrange(seq: SkeletonSequence, layout: BodyPartLayout) -> SkeletonSequence:
    """Body-part row order for every actor."""
    return reorder_joints(seq, layout)


def encode(seq: SkeletonSequence, cfg: RunConfig, stats: GlobalStats | None):
    """Mask channels, merge actors, and map to an action image."""
    seq = merge_actors(mask_channels(seq, cfg.channel_mask))
    return encode_baseline(seq, stats) if stats is not None else encode_proposed(seq)


def build_images(pairs, cfg: RunConfig, stats, *, augment: bool):
    """(images in [0, 1], labels) for a split; ``augment`` expands train data."""
    if not pairs:
        return [], np.zeros(0, dtype=np.int64)
    layout = resolve_layout(cfg, pairs[0][1].joint_count)
    seqs = [arrange(s, layout) for _, s in pairs]
    labels = [e.label for e, _ in pairs]
    if augment and cfg.augment.multiplicity > 0:
        seqs = expand(seqs, cfg.augment, split="train")
        labels = [lab for lab in labels for _ in range(cfg.augment.multiplicity + 1)]
    images = [encode(s, cfg, stats).pixels / 255.0 for s in seqs]
    return images, np.array(labels, dtype=np.int64)


# --- commands ------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    if cfg.synth is None:
        raise ConfigError("synth needs a 'synth' spec in the config")
    manifest, seqs = generate_synthetic(cfg.synth)
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for e, s in zip(manifest.entries, seqs):
        (out / e.path).write_text(format_jsonl(s))
    manifest.save(out / "manifest.json")
    return out / "manifest.json"


def cmd_stats(cfg: RunConfig) -> Path:
    data = load_dataset(cfg)
    if data.failures:
        raise DataError(f"{len(data.failures)} file(s) failed to load: {data.failures[0][1]}")
    train_pairs = data.split("train")
    if not train_pairs:
        raise DataError("no training sequences")
    layout = resolve_layout(cfg, train_pairs[0][1].joint_count)
    stats = compute_global_stats(mask_channels(arrange(s, layout), cfg.channel_mask) for _, s in train_pairs)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats.to_json(), indent=1) + "\n")
    return out / "stats.json"


@dataclass
class EncodeResult:
    index_path: Path
    written: int
    failures: list[tuple[str, str]]


def cmd_encode(cfg: RunConfig) -> EncodeResult:
    stats = load_stats(cfg)
    data = load_dataset(cfg)
    out = Path(cfg.out_dir) / "images"
    out.mkdir(parents=True, exist_ok=True)
    index, failures = [], list(data.failures)
    layouts: dict[int, BodyPartLayout] = {}
    for e, seq in zip(data.manifest.entries, data.sequences):
        if seq is None:
            continue
        try:
            layout = layouts.setdefault(seq.joint_count, resolve_layout(cfg, seq.joint_count))
            img = encode(arrange(seq, layout), cfg, stats)
        except (ConfigError, ValueError) as err:
            failures.append((e.path, str(err)))
            continue
        name = f"{seq.source_id or Path(e.path).stem}.png"
        export_png(img, out / name)
        index.append({"path": name, "label": e.label, "split": e.split, "degenerate": img.degenerate})
    (out / "index.json").write_text(json.dumps({"images": index, "failures": failures}, indent=1) + "\n")
    return EncodeResult(out / "index.json", len(index), failures)


def cmd_augment(cfg: RunConfig) -> Path:
    """Write the expanded train split (and untouched test split) as JSON lines."""
    data = load_dataset(cfg)
    if data.failures:
        raise DataError(f"{len(data.failures)} file(s) failed to load: {data.failures[0][1]}")
    out = Path(cfg.out_dir) / "augmented"
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    train_pairs = data.split("train")
    expanded = expand([s for _, s in train_pairs], cfg.augment, split="train")
    per = cfg.augment.multiplicity + 1
    for i, seq in enumerate(expanded):
        entry, orig = train_pairs[i // per]
        name = f"{orig.source_id}_aug{i % per}.jsonl" if i % per else f"{orig.source_id}.jsonl"
        (out / name).write_text(format_jsonl(replace(seq, source_id=Path(name).stem)))
        entries.append(ManifestEntry(name, entry.label, "train"))
    for entry, seq in data.split("test"):
        name = f"{seq.source_id}.jsonl"
        (out / name).write_text(format_jsonl(seq))
        entries.append(ManifestEntry(name, entry.label, "test"))
    DatasetManifest(entries, data.manifest.class_names).save(out / "manifest.json")
    return out / "manifest.json"


METRIC_FIELDS = ["epoch", "lr", "loss", "train_acc", "test_acc"]


def _metrics_csv(history) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(row[k]) if isinstance(row.get(k), float) else row.get(k, "")) for k in METRIC_FIELDS})
    return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    history: list[dict]


def cmd_train(cfg: RunConfig, resume: str | None = None) -> TrainResult:
    stats = load_stats(cfg)
    data = load_dataset(cfg)
    if data.failures:
        raise DataError(f"{len(data.failures)} file(s) failed to load: {data.failures[0][1]}")
    train_pairs, test_pairs = data.split("train"), data.split("test")
    if not train_pairs:
        raise DataError("no training sequences")
    net_cfg = cfg.net_config(len(data.manifest.class_names))
    state = None
    if resume:
        net, state, meta = load_checkpoint(resume)
        if net.config != net_cfg:
            raise ConfigError("checkpoint network config differs from the run config")
    else:
        net = MultiScaleNet(net_cfg)

    x_train, y_train = build_images(train_pairs, cfg, stats, augment=True)
    x_train = net.prepare(x_train)
    evaluate = None
    if test_pairs:
        x_test, y_test = build_images(test_pairs, cfg, stats, augment=False)
        x_test = net.prepare(x_test)

        def evaluate(n):
            return float(np.mean(n.predict_batch(x_test) == y_test))

    log.info("training on %d images, testing on %d", len(y_train), len(test_pairs))
    state = train(
        net, x_train, y_train, cfg.optimizer, cfg.epochs, cfg.batch_size, cfg.seed,
        state=state, evaluate=evaluate,
        log=lambda r: log.info("epoch %(epoch)d lr %(lr)g loss %(loss).4f train %(train_acc).3f", r),
    )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"run": cfg.to_json(), "class_names": data.manifest.class_names,
            "stats": stats.to_json() if stats else None}
    save_checkpoint(out / "model.ckpt", net, state, meta)
    (out / "metrics.csv").write_text(_metrics_csv(state.history))
    (out / "metrics.json").write_text(json.dumps(state.history, indent=1) + "\n")
    return TrainResult(out / "model.ckpt", out / "metrics.csv", state.history)


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float | None]
    confusion: list[list[int]]  # rows = true class
    class_names: list[str]
    meta: dict

    def to_json(self) -> dict:
        return asdict(self)


def confusion_matrix(truth, pred, m: int) -> np.ndarray:
    cm = np.zeros((m, m), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def evaluation_report(truth, pred, class_names, meta=None) -> EvalReport:
    m = len(class_names)
    cm = confusion_matrix(truth, pred, m)
    rows = cm.sum(axis=1)
    per_class = [float(cm[i, i] / rows[i]) if rows[i] else None for i in range(m)]
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    return EvalReport(acc, per_class, cm.tolist(), list(class_names), meta or {})


def render_heatmap(cm: np.ndarray, cell: int = 16) -> np.ndarray:
    """Row-normalized confusion matrix as RGB blocks, white (0) to dark blue (1)."""
    cm = np.asarray(cm, dtype=np.float64)
    rows = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    white, blue = np.array([255.0, 255.0, 255.0]), np.array([8.0, 48.0, 107.0])
    colors = white + frac[..., None] * (blue - white)
    img = np.kron(colors, np.ones((cell, cell, 1)))
    # one-pixel grid lines between cells
    img[::cell, :, :] = 200
    img[:, ::cell, :] = 200
    return np.rint(img).astype(np.uint8)


def cmd_eval(checkpoint: str, manifest: str | None = None, split: str = "test",
             out_dir: str | None = None) -> EvalReport:
    net, _, meta = load_checkpoint(checkpoint)
    if "run" not in meta:
        raise ConfigError(f"{checkpoint} carries no run config")
    cfg = RunConfig.from_json(meta["run"])
    stats = GlobalStats.from_json(meta["stats"]) if meta.get("stats") else None
    data = load_dataset(cfg, manifest)
    if data.failures:
        raise DataError(f"{len(data.failures)} file(s) failed to load: {data.failures[0][1]}")
    names = data.manifest.class_names
    if len(names) != net.config.class_count:
        raise ConfigError(
            f"checkpoint has {net.config.class_count} classes, manifest has {len(names)}"
        )
    pairs = data.split(split)
    if not pairs:
        raise DataError(f"no sequences in split {split!r}")
    images, labels = build_images(pairs, cfg, stats, augment=False)
    pred = net.predict_batch(net.prepare(images))
    report = evaluation_report(labels, pred, names, {"checkpoint": str(checkpoint), "split": split,
                                                     "count": len(labels)})
    out = Path(out_dir or Path(cfg.out_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *names])
    for name, row in zip(names, report.confusion):
        w.writerow([name, *row])
    (out / "confusion.csv").write_text(buf.getvalue())
    (out / "confusion.png").write_bytes(png.encode(render_heatmap(np.array(report.confusion))))
    return report


def gradcheck_fixture(precision: str = "double", seed: int = 0):
    """Default multi-scale net and a synthetic action image for gradient checks."""
    dtype = {"double": "float64", "single": "float32"}.get(precision)
    if dtype is None:
        raise ConfigError(f"precision must be 'double' or 'single', got {precision!r}")
    spec = SynthSpec(class_count=3, sequences_per_class=1, test_per_class=0, seed=seed)
    _, seqs = generate_synthetic(spec)
    seq = seqs[1]
    image = encode_proposed(arrange(seq, default_layout(seq.joint_count))).pixels / 255.0
    net = MultiScaleNet(NetConfig(class_count=3, dtype=dtype, init_seed=seed))
    return net, image, int(seq.label)


def cmd_gradcheck(precision: str = "double", h: float = 1e-5, tolerance: float = 1e-4,
                  n_params: int = 200, seed: int = 0):
    net, image, label = gradcheck_fixture(precision, seed)
    return grad_check(net, image, label, h=h, tolerance=tolerance, n_params=n_params, seed=seed)

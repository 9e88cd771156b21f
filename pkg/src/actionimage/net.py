"""Multi-scale CNN with one shared fully convolutional trunk, written in numpy.

Each input image is resized to every configured scale. The same trunk
(3x3 conv -> ReLU -> optional 2x2 max-pool, repeated) and the same linear
classifier run on every copy; global average pooling makes the feature
length independent of the scale. Training minimizes the mean of the
cross-entropy of every per-scale head plus one head on the averaged logits.

All parameters live in one flat vector; layer weights are views into it.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from actionimage.mapping import bilinear
from actionimage.skeleton import ConfigError


class NumericError(RuntimeError):
    """Loss or gradient stopped being finite."""


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    stride: int = 1
    pool: bool = True


DEFAULT_BLOCKS = (ConvBlock(16), ConvBlock(32), ConvBlock(64), ConvBlock(64))


@dataclass(frozen=True)
class NetConfig:
    class_count: int
    blocks: tuple[ConvBlock, ...] = DEFAULT_BLOCKS
    scales: tuple[int, ...] = (64, 48, 32)
    in_channels: int = 3
    average: str = "logits"  # or "probs"
    shared_classifier: bool = True
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if self.class_count < 2:
            raise ConfigError("need at least two classes")
        if not blocks or not self.scales:
            raise ConfigError("need at least one conv block and one scale")
        if any(b.stride < 1 or b.out_channels < 1 for b in blocks):
            raise ConfigError("strides and channel counts must be >= 1")
        if self.average not in ("logits", "probs"):
            raise ConfigError(f"average must be 'logits' or 'probs', got {self.average!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for s in self.scales:
            self.feature_size(s)

    def feature_size(self, size: int) -> int:
        """Spatial size of the trunk output for a ``size`` x ``size`` input."""
        if size < 4:
            raise ConfigError(f"scale {size} is below the 4 pixel minimum")
        for i, b in enumerate(self.blocks):
            size = (size - 1) // b.stride + 1
            if b.pool:
                if size < 2:
                    raise ConfigError(f"scale collapses to {size} pixel(s) before pool of block {i}")
                size //= 2
        return size

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> NetConfig:
        d = dict(d)
        d["blocks"] = tuple(ConvBlock(**b) for b in d.get("blocks", [asdict(b) for b in DEFAULT_BLOCKS]))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad net config: {e}") from e


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample -log p_k and its gradient p - onehot(k) w.r.t. the logits."""
    p = softmax(logits)
    rows = np.arange(len(labels))
    z = logits - logits.max(axis=-1, keepdims=True)
    loss = np.log(np.exp(z).sum(axis=-1)) - z[rows, labels]
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, grad


# layer primitives; x is NHWC throughout

def _conv_forward(x, w, b, stride):
    n, h, wd, c = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i in range(3) for j in range(3)],
        axis=-1,
    ).reshape(n * ho * wo, 9 * c)
    out = (cols @ w + b).reshape(n, ho, wo, -1)
    return out, (cols, x.shape, stride)


def _conv_backward(dout, w, cache):
    cols, (n, h, wd, c), stride = cache
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = cols.T @ d2
    db = d2.sum(axis=0)
    dcols = (d2 @ w.T).reshape(n, ho, wo, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    win = (
        x[:, :2 * h2, :2 * w2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, cache):
    idx, (n, h, w, c) = cache
    h2, w2 = h // 2, w // 2
    dwin = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros((n, h, w, c), dtype=dout.dtype)
    dx[:, :2 * h2, :2 * w2, :] = (
        dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    )
    return dx


@dataclass
class ForwardResult:
    scale_logits: list[np.ndarray]  # one (B, m) array per scale
    averaged: np.ndarray  # (B, m); log of mean probabilities in "probs" mode
    features: list[np.ndarray] = field(default_factory=list, repr=False)
    caches: list = field(default_factory=list, repr=False)


class MultiScaleNet:
    def __init__(self, config: NetConfig, params: np.ndarray | None = None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.layout = self._param_layout()
        size = sum(math.prod(shape) for _, shape, _ in self.layout)
        if params is None:
            self.params = np.zeros(size, dtype=self.dtype)
            self._initialize()
        else:
            params = np.asarray(params)
            if params.shape != (size,):
                raise ConfigError(f"expected {size} parameters, got {params.shape}")
            self.params = params.astype(self.dtype, copy=True)

    def _param_layout(self):
        cfg = self.config
        layout, cin = [], cfg.in_channels
        for i, b in enumerate(cfg.blocks):
            layout.append((f"conv{i}.w", (9 * cin, b.out_channels), 9 * cin))
            layout.append((f"conv{i}.b", (b.out_channels,), None))
            cin = b.out_channels
        heads = [""] if cfg.shared_classifier else [str(s) for s in range(len(cfg.scales))]
        for h in heads:
            layout.append((f"fc{h}.w", (cin, cfg.class_count), cin))
            layout.append((f"fc{h}.b", (cfg.class_count,), None))
        return layout

    def _initialize(self):
        # He-style fan-in scaled Gaussian weights, zero biases
        rng = np.random.default_rng(self.config.init_seed)
        for name, view in self.named_params().items():
            fan_in = dict((n, f) for n, _, f in self.layout)[name]
            if fan_in is not None:
                view[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=view.shape)

    def named_params(self, flat: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Views of ``flat`` (default: the parameter vector) split per layer."""
        flat = self.params if flat is None else flat
        out, pos = {}, 0
        for name, shape, _ in self.layout:
            k = math.prod(shape)
            out[name] = flat[pos:pos + k].reshape(shape)
            pos += k
        return out

    def layer_slices(self) -> dict[str, slice]:
        out, pos = {}, 0
        for name, shape, _ in self.layout:
            k = math.prod(shape)
            out[name] = slice(pos, pos + k)
            pos += k
        return out

    # --- inference -----------------------------------------------------

    def prepare(self, images) -> list[np.ndarray]:
        """Resize a batch of (H, W, 3) images in [0, 1] to every scale."""
        images = list(images)
        return [
            np.stack([bilinear(im, (s, s)) for im in images]).astype(self.dtype)
            for s in self.config.scales
        ]

    def _trunk_forward(self, x, p, keep):
        caches = []
        for i, blk in enumerate(self.config.blocks):
            x, conv_cache = _conv_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"], blk.stride)
            mask = x > 0
            x = x * mask
            pool_cache = None
            if blk.pool:
                x, pool_cache = _pool_forward(x)
            if keep:
                caches.append((conv_cache, mask, pool_cache))
        return x, caches

    def forward(self, inputs, keep_caches: bool = False) -> ForwardResult:
        """``inputs``: one (B, s, s, C) array per scale, as from :meth:`prepare`."""
        if len(inputs) != len(self.config.scales):
            raise ValueError(f"expected {len(self.config.scales)} scale inputs, got {len(inputs)}")
        p = self.named_params()
        logits, feats, caches = [], [], []
        for s, x in enumerate(inputs):
            fmap, cache = self._trunk_forward(np.asarray(x, dtype=self.dtype), p, keep_caches)
            f = fmap.mean(axis=(1, 2))
            head = "fc" if self.config.shared_classifier else f"fc{s}"
            logits.append(f @ p[f"{head}.w"] + p[f"{head}.b"])
            feats.append(f)
            caches.append((cache, fmap.shape))
        if self.config.average == "logits":
            avg = sum(logits) / len(logits)
        else:
            avg = np.log(sum(softmax(z) for z in logits) / len(logits))
        return ForwardResult(logits, avg, feats, caches if keep_caches else [])

    def forward_image(self, image) -> ForwardResult:
        return self.forward(self.prepare([image]))

    def activation_pattern(self, inputs) -> list[np.ndarray]:
        """ReLU signs and pool winners; the loss is smooth while these hold still."""
        out = []
        for cache, _ in self.forward(inputs, keep_caches=True).caches:
            for _, mask, pool_cache in cache:
                out.append(mask)
                if pool_cache is not None:
                    out.append(pool_cache[0])
        return out

    def predict(self, image) -> tuple[int, np.ndarray]:
        """Class index (lowest on ties) and probabilities from the averaged head."""
        probs = softmax(self.forward_image(image).averaged[0].astype(np.float64))
        return int(np.argmax(probs)), probs

    def predict_batch(self, inputs) -> np.ndarray:
        return np.argmax(self.forward(inputs).averaged, axis=-1)

    # --- training ------------------------------------------------------

    def loss(self, inputs, labels) -> float:
        return self.loss_and_grad(inputs, labels, need_grad=False)[0]

    def loss_and_grad(self, inputs, labels, need_grad: bool = True):
        """Mean over the S+1 heads and over the batch of -log p_label.

        Returns ``(loss, flat gradient or None, averaged logits)``.
        """
        labels = np.asarray(labels, dtype=np.int64)
        m = self.config.class_count
        if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= m):
            raise ValueError(f"labels must lie in [0, {m})")
        res = self.forward(inputs, keep_caches=need_grad)
        n_scales = len(res.scale_logits)
        n_heads, batch = n_scales + 1, len(labels)
        total = 0.0
        dlogits = []
        for z in res.scale_logits:
            l, g = cross_entropy(z, labels)
            total += l.sum()
            dlogits.append(g)
        if self.config.average == "logits":
            l, g = cross_entropy(res.averaged, labels)
            total += l.sum()
            dlogits = [d + g / n_scales for d in dlogits]
        else:
            rows = np.arange(batch)
            pbar = np.exp(res.averaged)
            total += -res.averaged[rows, labels].sum()
            for s, z in enumerate(res.scale_logits):
                ps = softmax(z)
                pk = ps[rows, labels][:, None]
                onehot = np.zeros_like(ps)
                onehot[rows, labels] = 1.0
                dlogits[s] = dlogits[s] - (pk * (onehot - ps)) / (n_scales * pbar[rows, labels][:, None])
        loss = float(total) / (n_heads * batch)
        if not need_grad:
            return loss, None, res.averaged
        grad = np.zeros_like(self.params)
        gp = self.named_params(grad)
        p = self.named_params()
        for s, (dz, f, (caches, fshape)) in enumerate(zip(dlogits, res.features, res.caches)):
            dz = (dz / (n_heads * batch)).astype(self.dtype)
            head = "fc" if self.config.shared_classifier else f"fc{s}"
            gp[f"{head}.w"] += f.T @ dz
            gp[f"{head}.b"] += dz.sum(axis=0)
            df = dz @ p[f"{head}.w"].T
            _, h, w, _ = fshape
            dx = np.broadcast_to(df[:, None, None, :] / (h * w), fshape)
            for i in reversed(range(len(self.config.blocks))):
                conv_cache, mask, pool_cache = caches[i]
                if pool_cache is not None:
                    dx = _pool_backward(dx, pool_cache)
                dx = dx * mask
                dx, dw, db = _conv_backward(dx, p[f"conv{i}.w"], conv_cache)
                gp[f"conv{i}.w"] += dw
                gp[f"conv{i}.b"] += db
        return loss, grad, res.averaged


# --- optimizer ---------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0004
    constant_epochs: int = 8
    step_epochs: int = 5
    gamma: float = 0.1

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr and weight decay must be >= 0, momentum in [0, 1)")
        if self.constant_epochs < 0 or self.step_epochs < 1 or not 0 < self.gamma <= 1:
            raise ConfigError("bad learning rate schedule")

    def learning_rate(self, epoch: int) -> float:
        """Rate for 1-based ``epoch``: constant, then divided every ``step_epochs``."""
        if epoch <= self.constant_epochs:
            return self.lr
        drops = math.ceil((epoch - self.constant_epochs) / self.step_epochs)
        return self.lr * self.gamma ** drops

    def to_json(self) -> dict:
        return asdict(self)


def sgd_step(params, grad, velocity, lr, momentum, weight_decay):
    """In place: v <- momentum*v - lr*(grad + wd*params); params <- params + v."""
    velocity *= momentum
    velocity -= lr * (grad + weight_decay * params)
    params += velocity


@dataclass
class TrainState:
    velocity: np.ndarray
    epoch: int = 0  # completed epochs
    history: list[dict] = field(default_factory=list)


def train(net: MultiScaleNet, inputs, labels, opt: OptimizerConfig, epochs: int,
          batch_size: int = 32, seed: int = 0, state: TrainState | None = None,
          evaluate=None, log=None) -> TrainState:
    """Train in place up to ``epochs`` total epochs; resumes from ``state``.

    ``inputs`` are per-scale stacks from :meth:`MultiScaleNet.prepare`.
    The shuffle of epoch ``e`` is drawn from ``(seed, e)`` alone, so resuming
    reproduces an uninterrupted run exactly. ``evaluate(net)`` may return a
    test accuracy to record per epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    if state is None:
        state = TrainState(np.zeros_like(net.params))
    for epoch in range(state.epoch + 1, epochs + 1):
        lr = opt.learning_rate(epoch)
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grad, avg = net.loss_and_grad([x[idx] for x in inputs], labels[idx])
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite loss/gradient at epoch {epoch}, batch starting {start}")
            sgd_step(net.params, grad, state.velocity, lr, opt.momentum, opt.weight_decay)
            total += loss * len(idx)
            correct += int((np.argmax(avg, axis=-1) == labels[idx]).sum())
        row = {"epoch": epoch, "lr": lr, "loss": total / n, "train_acc": correct / n}
        if evaluate is not None:
            row["test_acc"] = evaluate(net)
        state.history.append(row)
        state.epoch = epoch
        if log is not None:
            log(row)
    return state


# --- gradient check ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict[str, float]
    worst: list[tuple[str, int, float, float, float]]  # layer, index, analytic, numeric, rel
    checked: int
    tolerance: float
    kinks: int = 0  # samples skipped because +-h crossed a ReLU or pool boundary

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [f"checked {self.checked} parameters ({self.kinks} kink crossings resampled), "
                 f"max relative error {self.max_rel_error:.3e} "
                 f"(tolerance {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.per_layer.items():
            lines.append(f"  {name:<10} {err:.3e}")
        if not self.passed:
            lines.append("worst parameters:")
            for name, i, a, num, rel in self.worst:
                lines.append(f"  {name}[{i}] analytic={a:.6e} numeric={num:.6e} rel={rel:.3e}")
        return "\n".join(lines)


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(net: MultiScaleNet, image, label: int, h: float = 1e-5, tolerance: float = 1e-4,
               n_params: int = 200, seed: int = 0, floor: float = 1e-8) -> GradCheckReport:
    """Central-difference check of the analytic gradient of the loss.

    Samples at least ``n_params`` parameters, spread evenly over every
    layer. ``image`` is one (H, W, 3) array in [0, 1]. A sample whose +-h
    step flips a ReLU sign or a pool winner straddles a kink, where the
    difference quotient is not a derivative; it is replaced by another draw
    from the same layer and counted in ``kinks``.
    """
    inputs = net.prepare([image])
    labels = np.array([label])
    _, grad, _ = net.loss_and_grad(inputs, labels)
    base = net.activation_pattern(inputs)
    rng = np.random.default_rng(seed)
    slices = net.layer_slices()

    def smooth():
        return all(np.array_equal(a, b) for a, b in zip(base, net.activation_pattern(inputs)))

    # even share per layer, smallest first; any shortfall moves on to larger layers
    order = sorted(slices.items(), key=lambda kv: kv[1].stop - kv[1].start)
    per_layer, rows, kinks, left = {}, [], 0, n_params
    for k, (name, sl) in enumerate(order):
        quota = math.ceil(left / (len(order) - k))
        errs = []
        for j in rng.permutation(sl.stop - sl.start):
            if len(errs) == quota:
                break
            i = sl.start + int(j)
            old = net.params[i]
            net.params[i] = old + h
            up = net.loss(inputs, labels)
            ok = smooth()
            net.params[i] = old - h
            down = net.loss(inputs, labels)
            ok = ok and smooth()
            net.params[i] = old
            if not ok:
                kinks += 1
                continue
            num = (up - down) / (2 * h)
            rel = float(relative_error(grad[i], num, floor))
            errs.append(rel)
            rows.append((name, int(j), float(grad[i]), num, rel))
        per_layer[name] = max(errs, default=0.0)
        left -= len(errs)
    per_layer = {name: per_layer[name] for name in slices}
    rows.sort(key=lambda r: -r[4])
    return GradCheckReport(max(per_layer.values()), per_layer, rows[:10], len(rows), tolerance, kinks)


# --- checkpoints -------------------------------------------------------

CHECKPOINT_MAGIC = b"MSCNNCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net: MultiScaleNet, state: TrainState | None = None, meta: dict | None = None) -> None:
    """Header JSON + raw little-endian parameter and velocity vectors.

    The byte stream depends only on its inputs.
    """
    velocity = state.velocity if state is not None else np.zeros_like(net.params)
    header = {
        "version": CHECKPOINT_VERSION,
        "net": net.config.to_json(),
        "count": int(net.params.size),
        "dtype": net.config.dtype,
        "epoch": state.epoch if state is not None else 0,
        "history": state.history if state is not None else [],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    le = net.dtype.newbyteorder("<")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(net.params.astype(le).tobytes())
        f.write(velocity.astype(le).tobytes())


def load_checkpoint(path) -> tuple[MultiScaleNet, TrainState, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {header.get('version')}")
    dt = np.dtype(header["dtype"]).newbyteorder("<")
    count = header["count"]
    body = raw[12 + hlen:]
    if len(body) != 2 * count * dt.itemsize:
        raise ConfigError(f"{path}: truncated checkpoint")
    params = np.frombuffer(body, dt, count, 0)
    velocity = np.frombuffer(body, dt, count, count * dt.itemsize)
    net = MultiScaleNet(NetConfig.from_json(header["net"]), params)
    state = TrainState(velocity.astype(net.dtype), header["epoch"], header["history"])
    return net, state, header["meta"]

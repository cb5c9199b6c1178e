"""Encoder ``f`` and projection head ``g`` built on :mod:`curatedcl.autodiff`.

Parameters live in a :class:`ModelParams` container as plain float64 arrays
(plus batch-norm running statistics as buffers). A forward pass wraps them
in fresh graph leaves, so every training step builds its own graph.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"CUR1"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "small_cnn"
    conv_channels: tuple = (16, 32, 64)
    kernel_size: int = 3
    hidden_dim: int = 128
    projection_dim: int = 32
    init_seed: int = 0
    in_channels: int = 1
    image_size: int = 28

    def validate(self, batch_size=None):
        if self.kind not in ("small_cnn", "mlp"):
            raise ConfigError(f"encoder kind must be small_cnn or mlp, got {self.kind!r}", key="encoder.kind")
        if self.projection_dim > self.hidden_dim:
            raise ConfigError(
                f"projection_dim {self.projection_dim} exceeds hidden_dim {self.hidden_dim}",
                key="encoder.projection_dim",
            )
        if batch_size is not None and self.projection_dim >= batch_size:
            raise ConfigError(
                f"projection_dim {self.projection_dim} must be below batch size {batch_size} "
                "for a usable covariance estimate",
                key="encoder.projection_dim",
            )
        if self.kind == "small_cnn":
            size = self.image_size
            # same-padded convs; 2x2 pooling after every block but the last
            for _ in self.conv_channels[:-1]:
                size //= 2
            if size < 1 or self.kernel_size % 2 == 0:
                raise ConfigError(
                    f"image size {self.image_size} too small for {len(self.conv_channels)} conv blocks "
                    f"(or even kernel {self.kernel_size})",
                    key="encoder.image_size",
                )


@dataclass
class ModelParams:
    config: EncoderConfig
    weights: dict  # name -> ndarray, trainable, stable insertion order
    buffers: dict = field(default_factory=dict)  # batch-norm running statistics
    metadata: dict = field(default_factory=dict)

    def names(self):
        return list(self.weights)

    def copy(self):
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            dict(self.metadata),
        )

    def commit_bn_stats(self, batch_stats: dict, momentum=BN_MOMENTUM):
        """Fold batch statistics from a training forward into the running averages."""
        for name, stats in batch_stats.items():
            for key in ("mean", "var"):
                buf = self.buffers[f"{name}.running_{key}"]
                buf *= 1 - momentum
                buf += momentum * stats[key]


def _kaiming(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(config: EncoderConfig) -> ModelParams:
    """Fan-in scaled (Kaiming normal) weights, zero biases, unit BN scales."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    w, b = {}, {}

    def bn(name, width):
        w[f"{name}.gamma"] = np.ones(width)
        w[f"{name}.beta"] = np.zeros(width)
        b[f"{name}.running_mean"] = np.zeros(width)
        b[f"{name}.running_var"] = np.ones(width)

    if config.kind == "small_cnn":
        cin, k = config.in_channels, config.kernel_size
        for i, cout in enumerate(config.conv_channels):
            w[f"enc.conv{i}.kernel"] = _kaiming(rng, (cout, cin, k, k), cin * k * k)
            bn(f"enc.bn{i}", cout)
            cin = cout
        w["enc.fc.weight"] = _kaiming(rng, (cin, config.hidden_dim), cin)
        w["enc.fc.bias"] = np.zeros(config.hidden_dim)
    else:
        d_in = config.in_channels * config.image_size**2
        for i, (a, c) in enumerate([(d_in, config.hidden_dim), (config.hidden_dim, config.hidden_dim)]):
            w[f"enc.fc{i}.weight"] = _kaiming(rng, (a, c), a)
            w[f"enc.fc{i}.bias"] = np.zeros(c)
    h = config.hidden_dim
    w["head.fc0.weight"] = _kaiming(rng, (h, h), h)
    w["head.fc0.bias"] = np.zeros(h)
    bn("head.bn0", h)
    w["head.fc1.weight"] = _kaiming(rng, (h, config.projection_dim), h)
    w["head.fc1.bias"] = np.zeros(config.projection_dim)
    return ModelParams(config, w, b)


class Forward:
    """One define-by-run pass: graph leaves for the weights plus collected BN batch stats."""

    def __init__(self, params: ModelParams, training: bool, track_grad: bool = True):
        self.params = params
        self.training = training
        self.leaves = {k: ad.Tensor(v, requires_grad=track_grad) for k, v in params.weights.items()}
        self.bn_stats = {}

    def _bn(self, name, x):
        stats = {}
        out = ad.batch_norm(
            x, self.leaves[f"{name}.gamma"], self.leaves[f"{name}.beta"], BN_EPS,
            training=self.training,
            running_mean=self.params.buffers[f"{name}.running_mean"],
            running_var=self.params.buffers[f"{name}.running_var"],
            stats_out=stats,
        )
        if self.training:
            self.bn_stats[name] = stats
        return out

    def encoder(self, images) -> ad.Tensor:
        cfg = self.params.config
        x = images if isinstance(images, ad.Tensor) else ad.Tensor(images)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"encoder expects [N x {cfg.in_channels} x H x W], got {x.shape}")
        L = self.leaves
        if cfg.kind == "mlp":
            if x.shape[2:] != (cfg.image_size, cfg.image_size):
                raise DimensionError(f"mlp encoder expects {cfg.image_size}x{cfg.image_size} images, got {x.shape[2:]}")
            x = ad.reshape(x, (x.shape[0], -1))
            for i in range(2):
                x = ad.relu(ad.dense(x, L[f"enc.fc{i}.weight"], L[f"enc.fc{i}.bias"]))
            return x
        pad = cfg.kernel_size // 2
        last = len(cfg.conv_channels) - 1
        for i in range(len(cfg.conv_channels)):
            x = ad.conv2d(x, L[f"enc.conv{i}.kernel"], stride=1, padding=pad)
            x = ad.relu(self._bn(f"enc.bn{i}", x))
            if i < last:
                x = ad.avg_pool2d(x, 2)
        x = ad.global_avg_pool(x)
        return ad.dense(x, L["enc.fc.weight"], L["enc.fc.bias"])

    def projection(self, h: ad.Tensor) -> ad.Tensor:
        cfg = self.params.config
        if h.ndim != 2 or h.shape[1] != cfg.hidden_dim:
            raise DimensionError(f"projection head expects width {cfg.hidden_dim}, got shape {h.shape}")
        L = self.leaves
        x = ad.dense(h, L["head.fc0.weight"], L["head.fc0.bias"])
        x = ad.relu(self._bn("head.bn0", x))
        return ad.dense(x, L["head.fc1.weight"], L["head.fc1.bias"])

    def grads(self):
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.leaves.items()}


def encoder_forward(params: ModelParams, images, training=False) -> ad.Tensor:
    return Forward(params, training, track_grad=False).encoder(images)


def projection_forward(params: ModelParams, h, training=False) -> ad.Tensor:
    h = h if isinstance(h, ad.Tensor) else ad.Tensor(h)
    return Forward(params, training, track_grad=False).projection(h)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(params: ModelParams) -> bytes:
    meta = {"config": asdict(params.config), "metadata": params.metadata}
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), _pack_str(json.dumps(meta, sort_keys=True))]
    records = [("w:" + k, v) for k, v in params.weights.items()] + [("b:" + k, v) for k, v in params.buffers.items()]
    out.append(struct.pack("<I", len(records)))
    for name, arr in records:
        out.append(_pack_str(name))
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(params: ModelParams, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        n = self.u32(what)
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"checkpoint {what} is not valid UTF-8", offset=start) from exc


def load_checkpoint(path) -> ModelParams:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    meta_at = r.pos
    try:
        meta = json.loads(r.string("metadata"))
        config = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"checkpoint metadata unreadable: {exc}", offset=meta_at) from exc
    weights, buffers = {}, {}
    for _ in range(r.u32("record count")):
        name = r.string("record name")
        ndim = r.u32("rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition(":")
        if kind == "w":
            weights[key] = arr
        elif kind == "b":
            buffers[key] = arr
        else:
            raise FormatError(f"unknown record kind in {name!r}", offset=r.pos)
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after last record", offset=r.pos)
    return ModelParams(config, weights, buffers, meta.get("metadata", {}))

"""Image dataset loaders, a synthetic generator and a seeded batch iterator.

Pixels are scaled to ``[0, 1]`` at load time. Per-channel standardization
happens later, in :mod:`curatedcl.augment`.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 3073
DATA_ROOT_ENV = "CURATEDCL_DATA_ROOT"


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # [count, channels, H, W], float64 in [0, 1]
    labels: np.ndarray  # [count], int64
    name: str
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be [count, C, H, W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= self.class_count:
            raise FormatError(f"label {int(self.labels.max())} out of range for {self.class_count} classes")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, indices, name=None) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            self.images[idx].copy(), self.labels[idx].copy(), name or self.name, self.class_count
        )

    def fingerprint(self) -> str:
        """Content hash over shape, pixels and labels."""
        h = hashlib.sha256()
        h.update(repr((self.images.shape, self.class_count)).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def channel_stats(self):
        """Per-channel mean and standard deviation over the whole split."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        return tuple(float(m) for m in mean), tuple(float(max(s, 1e-6)) for s in std)


# ---------------------------------------------------------------------------
# MNIST IDX


def _read_idx(path, expected_magic, expected_ndim):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header ({len(raw)} bytes)", offset=0)
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: expected IDX magic {expected_magic}, found {magic}", offset=0)
    header = 4 + 4 * expected_ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", offset=len(raw))
    dims = struct.unpack(">" + "i" * expected_ndim, raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise FormatError(
            f"{path}: IDX payload has {len(raw) - header} bytes, dimensions {dims} need {need}",
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(image_path, label_path, name="mnist") -> ImageDataset:
    images = _read_idx(image_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(label_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"MNIST image count {len(images)} != label count {len(labels)}")
    data = images[:, None, :, :].astype(np.float64) / 255.0
    return ImageDataset(data, labels.astype(np.int64), name, 10)


def write_mnist_idx(dataset: ImageDataset, image_path, label_path):
    """Encode a single-channel dataset as IDX files (inverse of :func:`load_mnist_idx`)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise FormatError(f"IDX images are single-channel, got {c} channels")
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    Path(image_path).write_bytes(struct.pack(">iiii", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    Path(label_path).write_bytes(
        struct.pack(">ii", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def load_cifar10_binary(paths, name="cifar10") -> ImageDataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(
                f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}",
                offset=len(raw) - len(raw) % CIFAR_RECORD,
            )
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return ImageDataset(images, labels, name, 10)


def write_cifar10_binary(dataset: ImageDataset, path):
    if dataset.image_shape != (3, 32, 32):
        raise FormatError(f"CIFAR-10 records are 3x32x32, got {dataset.image_shape}")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def make_synthetic(class_count, per_class, size, seed, channels=1) -> ImageDataset:
    """Procedural oriented-grating classes for CI-scale runs.

    Class ``c`` is a windowed sinusoidal grating whose orientation is spread
    over ``[0, pi/2)`` so that a horizontal flip never maps one class onto
    another; frequency also varies with the class. Each sample jitters
    orientation, phase, frequency, envelope position, contrast and mean
    level, then adds Gaussian pixel noise (sigma 0.15).
    """
    if size < 8:
        raise ConfigError(f"synthetic image size must be >= 8, got {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size - 0.5
    xx = (xx + 0.5) / size - 0.5
    images = np.empty((class_count * per_class, channels, size, size))
    labels = np.repeat(np.arange(class_count), per_class)
    for i, c in enumerate(labels):
        theta = (c + 0.5) * (np.pi / 2) / class_count + rng.normal(0, 0.05)
        freq = 2.5 + 1.5 * (c % 3) + rng.normal(0, 0.1)
        phase = rng.normal(0, 0.3)
        cx, cy = rng.normal(0, 0.06, size=2)
        u = xx * np.cos(theta) + yy * np.sin(theta)
        env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.28**2))
        contrast = rng.uniform(0.15, 0.5)
        level = 0.5 + rng.uniform(-0.15, 0.15)
        base = level + contrast * env * np.cos(2 * np.pi * freq * u + phase)
        tint = 1.0 + rng.normal(0, 0.05, size=channels)
        img = base[None] * tint[:, None, None] + rng.normal(0, 0.15, size=(channels, size, size))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(images, labels.astype(np.int64), f"synthetic{class_count}x{per_class}", class_count)


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int = 128
    drop_last: bool = True

    def permutation(self, count, epoch):
        rng = np.random.default_rng([self.seed & 0xFFFFFFFFFFFFFFFF, 0x5EED, epoch])
        return rng.permutation(count)


def iterate_batches(dataset, plan: BatchPlan, epoch: int):
    """Deterministic shuffled index batches for one epoch."""
    count = len(dataset) if not isinstance(dataset, int) else dataset
    if plan.batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {plan.batch_size}", key="batch_size")
    if plan.batch_size > count:
        raise ConfigError(f"batch_size {plan.batch_size} exceeds dataset size {count}", key="batch_size")
    perm = plan.permutation(count, epoch)
    stop = count - count % plan.batch_size if plan.drop_last else count
    return [perm[i:i + plan.batch_size] for i in range(0, stop, plan.batch_size)]


# ---------------------------------------------------------------------------
# named datasets for the CLI / trainer


def resolve_data_root(data_root=None):
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _find(root: Path, names):
    for n in names:
        for cand in (root / n, root / "mnist" / n, root / "MNIST" / "raw" / n):
            if cand.exists():
                return cand
    raise FileNotFoundError(f"none of {names} found under {root}")


def load_named(data_cfg, split="train", data_root=None) -> ImageDataset:
    """Build the dataset a run config refers to.

    ``split`` is ``"train"`` or ``"test"``. Synthetic test splits use a
    different seed; MNIST and CIFAR use their official test files.
    """
    name = data_cfg.name
    if name == "synthetic":
        seed = data_cfg.seed if split == "train" else data_cfg.seed + 7919
        per_class = data_cfg.per_class if split == "train" else data_cfg.test_per_class
        return make_synthetic(data_cfg.classes, per_class, data_cfg.size, seed, channels=data_cfg.channels)

    root = resolve_data_root(data_root)
    if root is None:
        raise FileNotFoundError(f"dataset {name!r} needs a data root (--data-root or ${DATA_ROOT_ENV})")
    if name == "mnist":
        prefix = "train" if split == "train" else "t10k"
        ds = load_mnist_idx(
            _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]),
            _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]),
            name=f"mnist-{split}",
        )
    elif name == "cifar10":
        base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root
        files = [base / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else [base / "test_batch.bin"]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {missing}")
        ds = load_cifar10_binary(files, name=f"cifar10-{split}")
    else:
        raise ConfigError(f"unknown dataset {name!r}", key="data.name")

    limit = data_cfg.subset if split == "train" else data_cfg.test_subset
    if limit and limit < len(ds):
        # deterministic, class-agnostic prefix of a seeded permutation
        perm = np.random.default_rng(data_cfg.seed).permutation(len(ds))[:limit]
        ds = ds.subset(np.sort(perm))
    return ds

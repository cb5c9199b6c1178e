"""Stochastic two-view augmentation and controlled view corruption.

Every row of a batch gets its own seed derived from the batch seed with a
splitmix64 step, so views are reproducible regardless of processing order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15

LUMA = np.array([0.299, 0.587, 0.114])

CORRUPTION_MODES = ("blackout", "uniform_noise", "extreme_darken")


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """Fold integer keys into a 64-bit seed, one splitmix64 step per key."""
    s = base & _MASK64
    for k in keys:
        s = splitmix64(s ^ ((k * _GOLDEN) & _MASK64))
    return s


@dataclass(frozen=True)
class TransformSpec:
    crop_scale_range: tuple = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strengths: tuple = (0.4, 0.4, 0.4)  # brightness, contrast, saturation
    grayscale_prob: float = 0.2
    output_size: int | None = None  # None keeps the source resolution
    channel_mean: tuple | None = None
    channel_std: tuple | None = None

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}",
                              key="transform.crop_scale_range")
        for key in ("flip_prob", "jitter_prob", "grayscale_prob"):
            p = getattr(self, key)
            if not 0 <= p <= 1:
                raise ConfigError(f"{key} must be a probability, got {p}", key=f"transform.{key}")
        if len(self.jitter_strengths) != 3 or any(s < 0 for s in self.jitter_strengths):
            raise ConfigError(f"jitter_strengths needs three nonnegative values, got {self.jitter_strengths}",
                              key="transform.jitter_strengths")

    @classmethod
    def identity(cls, **kw):
        base = dict(crop_scale_range=(1.0, 1.0), flip_prob=0.0, jitter_prob=0.0,
                    jitter_strengths=(0.0, 0.0, 0.0), grayscale_prob=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class AugmentedBatchPair:
    """Two views of the same source rows, kept in ``[0, 1]`` until standardized."""

    raw1: np.ndarray
    raw2: np.ndarray
    source_indices: np.ndarray
    draw_seeds: np.ndarray
    channel_mean: np.ndarray = field(default=None)
    channel_std: np.ndarray = field(default=None)

    def _standardize(self, raw):
        c = raw.shape[1]
        mean = np.zeros(c) if self.channel_mean is None else np.asarray(self.channel_mean, dtype=np.float64)
        std = np.ones(c) if self.channel_std is None else np.asarray(self.channel_std, dtype=np.float64)
        return (raw - mean[None, :, None, None]) / std[None, :, None, None]

    @property
    def view1(self):
        return self._standardize(self.raw1)

    @property
    def view2(self):
        return self._standardize(self.raw2)

    def __len__(self):
        return len(self.source_indices)


# ---------------------------------------------------------------------------
# primitive transforms on a single [C, H, W] image


def resize_bilinear(image, out_h, out_w):
    """Bilinear resize with half-pixel centers and edge clamping."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def random_crop_resize(image, scale_range, output_size, rng):
    """Crop a square-aspect region whose area fraction is uniform in ``scale_range``."""
    c, h, w = image.shape
    frac = rng.uniform(scale_range[0], scale_range[1])
    side = np.sqrt(frac)
    ch = min(h, max(1, int(round(h * side))))
    cw = min(w, max(1, int(round(w * side))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[:, top:top + ch, left:left + cw]
    oh, ow = (h, w) if output_size is None else (output_size, output_size)
    return resize_bilinear(crop, oh, ow)


def horizontal_flip(image):
    return image[:, :, ::-1].copy()


def grayscale(image):
    if image.shape[0] != 3:
        return image.copy()
    gray = np.tensordot(LUMA, image, axes=(0, 0))
    return np.repeat(gray[None], 3, axis=0)


def random_grayscale(image, rng, prob=1.0):
    return grayscale(image) if rng.uniform() < prob else image


def color_jitter(image, strengths, rng):
    """Brightness, contrast and saturation in that order, each clamped to ``[0, 1]``."""
    b, c, s = strengths
    out = image
    fb = rng.uniform(1 - b, 1 + b)
    fc = rng.uniform(1 - c, 1 + c)
    fs = rng.uniform(1 - s, 1 + s)
    if b > 0:
        out = np.clip(out * fb, 0.0, 1.0)
    if c > 0:
        m = grayscale(out).mean() if out.shape[0] == 3 else out.mean()
        out = np.clip((out - m) * fc + m, 0.0, 1.0)
    if s > 0 and out.shape[0] == 3:
        g = grayscale(out)
        out = np.clip(g + (out - g) * fs, 0.0, 1.0)
    return out


def augment_image(image, spec: TransformSpec, rng):
    out = random_crop_resize(image, spec.crop_scale_range, spec.output_size, rng)
    if rng.uniform() < spec.flip_prob:
        out = horizontal_flip(out)
    if rng.uniform() < spec.jitter_prob:
        out = color_jitter(out, spec.jitter_strengths, rng)
    if rng.uniform() < spec.grayscale_prob:
        out = grayscale(out)
    return out


# ---------------------------------------------------------------------------
# batch level


def make_pair(dataset, indices, spec: TransformSpec, seed: int) -> AugmentedBatchPair:
    """Draw two independent transformations per source image."""
    indices = np.asarray(indices, dtype=np.int64)
    images = dataset.images if hasattr(dataset, "images") else dataset
    seeds = np.array([derive_seed(seed, int(row)) for row in range(len(indices))], dtype=np.uint64)
    views = ([], [])
    for s, idx in zip(seeds, indices):
        rng = np.random.default_rng(int(s))
        src = images[idx]
        views[0].append(augment_image(src, spec, rng))
        views[1].append(augment_image(src, spec, rng))
    return AugmentedBatchPair(
        raw1=np.stack(views[0]),
        raw2=np.stack(views[1]),
        source_indices=indices,
        draw_seeds=seeds,
        channel_mean=None if spec.channel_mean is None else np.asarray(spec.channel_mean, float),
        channel_std=None if spec.channel_std is None else np.asarray(spec.channel_std, float),
    )


def center_view(dataset, indices, spec: TransformSpec):
    """Unaugmented, standardized images (resized when ``output_size`` is set)."""
    images = dataset.images[np.asarray(indices, dtype=np.int64)]
    if spec.output_size is not None and images.shape[2:] != (spec.output_size, spec.output_size):
        images = np.stack([resize_bilinear(im, spec.output_size, spec.output_size) for im in images])
    pair = AugmentedBatchPair(
        images, images, np.asarray(indices), np.zeros(len(images), np.uint64),
        None if spec.channel_mean is None else np.asarray(spec.channel_mean, float),
        None if spec.channel_std is None else np.asarray(spec.channel_std, float),
    )
    return pair.view1


def corrupt_view(pair: AugmentedBatchPair, mode: str, rng, factor: float = 0.05) -> AugmentedBatchPair:
    """Replace view 2 with a degraded rendition; view 1 and indices are untouched."""
    if mode == "blackout":
        raw2 = np.zeros_like(pair.raw2)
    elif mode == "uniform_noise":
        raw2 = rng.uniform(0.0, 1.0, size=pair.raw2.shape)
    elif mode == "extreme_darken":
        raw2 = pair.raw2 * factor
    else:
        raise ConfigError(f"unknown corruption mode {mode!r}; expected one of {CORRUPTION_MODES}")
    return replace(pair, raw2=raw2)

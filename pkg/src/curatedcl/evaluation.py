"""Frozen-representation probes and embedding export."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import TransformSpec, center_view
from .config import parse_config_text
from .errors import ContractError, DimensionError, FormatError, NumericalError
from .model import Forward, ModelParams

EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sIIB")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [count, dim]
    labels: np.ndarray | None  # [count]
    source: str = "encoder_h"
    model_checkpoint: str = ""

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise DimensionError(f"embedding vectors must be [count x dim], got {self.vectors.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.vectors):
                raise ContractError(f"{len(self.vectors)} vectors but {len(self.labels)} labels")
        if not np.all(np.isfinite(self.vectors)):
            raise NumericalError("embedding set contains non-finite values")

    def __len__(self):
        return len(self.vectors)

    @property
    def dim(self):
        return self.vectors.shape[1]


_SOURCES = {"h": "encoder_h", "z": "projection_z", "encoder_h": "encoder_h", "projection_z": "projection_z"}


def _transform_for(params: ModelParams) -> TransformSpec:
    text = params.metadata.get("config")
    return parse_config_text(text).transform if text else TransformSpec()


def extract_embeddings(params: ModelParams, dataset, source="h", batch_size=256, checkpoint_id="") -> EmbeddingSet:
    """Inference-mode embeddings of unaugmented, standardized images."""
    if source not in _SOURCES:
        raise ContractError(f"source must be one of h, z; got {source!r}")
    source = _SOURCES[source]
    spec = _transform_for(params)
    chunks = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        fwd = Forward(params, training=False, track_grad=False)
        x = ad.Tensor(center_view(dataset, idx, spec))
        h = fwd.encoder(x)
        _check_finite(h, "encoder output h")
        out = h
        if source == "projection_z":
            out = fwd.projection(h)
            _check_finite(out, "projection output z")
        chunks.append(out.data)
    dim = params.config.hidden_dim if source == "encoder_h" else params.config.projection_dim
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, dim))
    return EmbeddingSet(vectors, dataset.labels.copy(), source, checkpoint_id)


def _check_finite(t, layer):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite activation in {layer}")


# ---------------------------------------------------------------------------
# probes


def linear_probe(train: EmbeddingSet, test: EmbeddingSet, epochs=100, lr=0.1, seed=0,
                 batch_size=256, weight_decay=0.0) -> float:
    """Softmax regression on frozen, train-standardized features; returns test top-1."""
    if train.dim != test.dim:
        raise DimensionError(f"train dim {train.dim} != test dim {test.dim}")
    if train.labels is None or test.labels is None:
        raise ContractError("linear probe needs labelled embeddings")
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if not set(np.unique(test.labels)) <= set(np.unique(train.labels)):
        raise ContractError("test labels contain classes absent from the training embeddings")
    mu = train.vectors.mean(axis=0)
    sd = train.vectors.std(axis=0) + 1e-8
    xtr = (train.vectors - mu) / sd
    xte = (test.vectors - mu) / sd
    y = train.labels
    rng = np.random.default_rng(seed)
    w = np.zeros((train.dim, classes))
    b = np.zeros(classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    n = len(xtr)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            logits = xtr[idx] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            p /= len(idx)
            vw = 0.9 * vw + xtr[idx].T @ p + weight_decay * w
            vb = 0.9 * vb + p.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    pred = np.argmax(xte @ w + b, axis=1)
    return float(np.mean(pred == test.labels))


def knn_predict(train: EmbeddingSet, queries: np.ndarray, k: int, chunk=1024) -> np.ndarray:
    """Cosine-distance majority vote.

    Ties in vote count go to the class with the smallest summed distance,
    then to the lowest class id.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if k > len(train):
        raise ContractError(f"k={k} exceeds {len(train)} training embeddings")
    if queries.shape[1] != train.dim:
        raise DimensionError(f"query dim {queries.shape[1]} != train dim {train.dim}")

    def unit(v):
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    tr = unit(train.vectors)
    labels = train.labels
    classes = int(labels.max()) + 1
    preds = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = unit(queries[s:s + chunk])
        dist = 1.0 - q @ tr.T
        if k < dist.shape[1]:
            nn = np.argpartition(dist, k - 1, axis=1)[:, :k]
        else:
            nn = np.broadcast_to(np.arange(dist.shape[1]), dist.shape)
        rows = np.arange(len(q))[:, None]
        nd = dist[rows, nn]
        nl = labels[nn]
        votes = np.zeros((len(q), classes))
        dsum = np.zeros((len(q), classes))
        np.add.at(votes, (np.repeat(rows, nn.shape[1], axis=1), nl), 1.0)
        np.add.at(dsum, (np.repeat(rows, nn.shape[1], axis=1), nl), nd)
        # lexicographic: most votes, then smallest distance sum, then lowest id
        for r in range(len(q)):
            best = np.flatnonzero(votes[r] == votes[r].max())
            if len(best) > 1:
                ds = dsum[r, best]
                best = best[ds == ds.min()]
            preds[s + r] = best[0]
    return preds


def knn_probe(train: EmbeddingSet, test: EmbeddingSet, k=5) -> float:
    if train.labels is None or test.labels is None:
        raise ContractError("k-NN probe needs labelled embeddings")
    preds = knn_predict(train, test.vectors, k)
    return float(np.mean(preds == test.labels))


# ---------------------------------------------------------------------------
# EMB1 files


def export_embeddings(emb: EmbeddingSet, path):
    """``EMB1``, u32 count, u32 dim, u8 has_labels, f32 vectors, optional u32 labels (all little-endian)."""
    path = Path(path)
    has_labels = emb.labels is not None
    count, dim = emb.vectors.shape
    payload = [
        _EMB_HEADER.pack(EMB_MAGIC, count, dim, int(has_labels)),
        np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes(),
    ]
    if has_labels:
        payload.append(np.ascontiguousarray(emb.labels, dtype="<u4").tobytes())
    try:
        path.write_bytes(b"".join(payload))
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {path}: {exc}") from exc
    return path


def import_embeddings(path) -> EmbeddingSet:
    raw = Path(path).read_bytes()
    if len(raw) < _EMB_HEADER.size:
        raise FormatError(f"{path}: truncated EMB1 header", offset=len(raw))
    magic, count, dim, has_labels = _EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    need = _EMB_HEADER.size + 4 * count * dim + 4 * count * has_labels
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)}", offset=min(len(raw), need))
    off = _EMB_HEADER.size
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=off).reshape(count, dim).astype(np.float64)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype="<u4", count=count, offset=off + 4 * count * dim).astype(np.int64)
    return EmbeddingSet(vectors, labels, "imported", str(path))

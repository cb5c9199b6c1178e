"""Fréchet distance between the two views of a batch, and the batch gate built on it.

A batch's two augmented views are each summarized as a Gaussian (mean and
shrunk sample covariance of their embeddings). The Fréchet distance between
those Gaussians scores how far the augmentation pulled the views apart. The
gate accepts batches scoring at most the calibrated threshold, re-draws the
augmentation once otherwise, and skips the update if the re-draw also fails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_SHRINKAGE = 1e-6
SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass
class ThresholdState:
    tau_frd: float
    calibration_epoch: int = 5
    per_batch_scores: list = field(default_factory=list)
    frozen: bool = True

    def to_dict(self):
        return {
            "tau_frd": self.tau_frd,
            "calibration_epoch": self.calibration_epoch,
            "per_batch_scores": list(self.per_batch_scores),
            "frozen": self.frozen,
        }


@dataclass(frozen=True)
class CurationDecision:
    frd_score: float
    accepted: bool
    attempt: int
    action: str  # "update" | "reaugmented_update" | "skipped" | "reaugment"


def gaussian_stats(z, shrinkage: float = DEFAULT_SHRINKAGE) -> GaussianStats:
    """Sample mean and unbiased covariance plus ``shrinkage * I``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"gaussian_stats needs at least 2 samples in an [N x d] array, got {z.shape}")
    mu = z.mean(axis=0)
    xc = z - mu
    cov = xc.T @ xc / (z.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += shrinkage
    return GaussianStats(mu, cov, z.shape[0])


def matrix_sqrt_psd(a) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; negative eigenvalues clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix_sqrt_psd needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractError("matrix_sqrt_psd input is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    r = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (r + r.T)


def frd(stats1: GaussianStats, stats2: GaussianStats) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))``.

    The cross term ``tr sqrt(sqrt(S1) S2 sqrt(S1))`` is evaluated as the sum
    of singular values of ``sqrt(S1) sqrt(S2)``. That avoids square-rooting
    tiny eigenvalues, whose absolute error scales with the largest one, and
    keeps ``frd(a, a)`` near zero for ill-conditioned covariances. Small
    negative results from roundoff clamp to 0.
    """
    if stats1.dim != stats2.dim:
        raise DimensionError(f"frd dimension mismatch: {stats1.dim} vs {stats2.dim}")
    diff = stats1.mean - stats2.mean
    root1 = matrix_sqrt_psd(stats1.cov)
    root2 = matrix_sqrt_psd(stats2.cov)
    cross = float(np.linalg.svd(root1 @ root2, compute_uv=False).sum())
    value = float(diff @ diff) + float(np.trace(stats1.cov) + np.trace(stats2.cov)) - 2.0 * cross
    return max(value, 0.0)


def frd_between(z1, z2, shrinkage: float = DEFAULT_SHRINKAGE, normalize: bool = False) -> float:
    """Score two embedding batches directly."""
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if normalize:
        z1 = z1 / np.maximum(np.linalg.norm(z1, axis=1, keepdims=True), 1e-12)
        z2 = z2 / np.maximum(np.linalg.norm(z2, axis=1, keepdims=True), 1e-12)
    return frd(gaussian_stats(z1, shrinkage), gaussian_stats(z2, shrinkage))


def mean_score(scores) -> float:
    """Arithmetic mean used for the threshold (correctly rounded sum over count)."""
    return math.fsum(scores) / len(scores)


def calibrate_threshold(scores, calibration_epoch: int = 5) -> ThresholdState:
    scores = [float(s) for s in scores]
    if not scores:
        raise ContractError("cannot calibrate a threshold from zero batch scores")
    return ThresholdState(mean_score(scores), calibration_epoch, scores, frozen=True)


def curate(frd_score: float, threshold: ThresholdState, attempt: int = 1) -> CurationDecision:
    """Accept if the score does not exceed the threshold.

    A rejection on attempt 1 asks for one fresh augmentation (action
    ``"reaugment"``); a rejection on attempt 2 skips the batch.
    """
    if not threshold.frozen:
        raise ContractError("threshold must be frozen before gating")
    if attempt not in (1, 2):
        raise ContractError(f"attempt must be 1 or 2, got {attempt}")
    accepted = not frd_score > threshold.tau_frd
    if accepted:
        action = "update" if attempt == 1 else "reaugmented_update"
    else:
        action = "reaugment" if attempt == 1 else "skipped"
    return CurationDecision(float(frd_score), accepted, attempt, action)

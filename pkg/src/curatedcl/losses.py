"""NT-Xent contrastive loss, positive-pair regularizers and their combination."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DimensionError

logger = logging.getLogger(__name__)

REGULARIZER_KINDS = ("huber", "l1", "l2", "none")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    huber_delta: float = 1.0
    lam: float = 1.0
    regularizer_kind: str = "huber"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}", key="loss.temperature")
        if not self.huber_delta > 0:
            raise ConfigError(f"huber_delta must be positive, got {self.huber_delta}", key="loss.huber_delta")
        if not self.lam >= 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}", key="loss.lam")
        if self.regularizer_kind not in REGULARIZER_KINDS:
            raise ConfigError(
                f"regularizer_kind must be one of {REGULARIZER_KINDS}, got {self.regularizer_kind!r}",
                key="loss.regularizer_kind",
            )


@dataclass(frozen=True)
class LossBreakdown:
    nt_xent: float
    regularizer: float
    total: float


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; zero vectors are floored and logged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < ad.NORM_FLOOR or nb < ad.NORM_FLOOR:
        logger.warning("degenerate projection: zero-norm vector in cosine similarity")
    sim = float(a @ b / (max(na, ad.NORM_FLOOR) * max(nb, ad.NORM_FLOOR)))
    return min(1.0, max(-1.0, sim))


def positive_partner(two_n: int) -> np.ndarray:
    """Index of each row's positive when view 1 rows come first, then view 2 rows."""
    n = two_n // 2
    return np.concatenate([np.arange(n, two_n), np.arange(n)])


def nt_xent(z: ad.Tensor, temperature: float, partner=None) -> ad.Tensor:
    """Mean over all 2N anchors of ``-log softmax`` of the positive among the other rows.

    ``z`` holds 2N projections; by default row ``k`` pairs with row ``k + N``.
    The denominator runs over every ``k != i``, positive included.
    """
    z = z if isinstance(z, ad.Tensor) else ad.Tensor(z)
    if z.ndim != 2 or z.shape[0] < 2 or z.shape[0] % 2:
        raise ContractError(f"nt_xent needs 2N >= 2 projection rows, got shape {z.shape}")
    partner = positive_partner(z.shape[0]) if partner is None else np.asarray(partner)
    zn = ad.normalize_rows(z)
    logits = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / temperature)
    per_anchor = ad.sub(ad.logsumexp_rows(logits, exclude_diagonal=True), ad.gather_cols(logits, partner))
    return ad.mean(per_anchor)


def huber_pair(zi, zj, delta: float) -> float:
    """Huber penalty on ``zi - zj``, averaged over coordinates."""
    zi, zj = np.asarray(zi, dtype=np.float64), np.asarray(zj, dtype=np.float64)
    if zi.shape != zj.shape:
        raise DimensionError(f"huber_pair dimension mismatch: {zi.shape} vs {zj.shape}")
    return ad.mean(ad.huber(ad.Tensor(zi - zj), delta)).item()


def regularizer_batch(z1: ad.Tensor, z2: ad.Tensor, config: LossConfig) -> ad.Tensor:
    """Mean over positive pairs of the per-pair penalty (itself a mean over coordinates).

    Inputs are used as given; :func:`regularized_loss` feeds L2-normalized rows.
    """
    if z1.shape != z2.shape:
        raise DimensionError(f"regularizer view shapes differ: {z1.shape} vs {z2.shape}")
    diff = ad.sub(z1, z2)
    kind = config.regularizer_kind
    if kind == "huber":
        pen = ad.huber(diff, config.huber_delta)
    elif kind == "l1":
        pen = ad.abs_(diff)
    elif kind == "l2":
        pen = ad.scale(ad.square(diff), 0.5)
    else:
        return ad.Tensor(0.0)
    # equal-width rows: mean of per-row means == mean over all entries
    return ad.mean(pen)


def regularized_loss(z1: ad.Tensor, z2: ad.Tensor, config: LossConfig):
    """``nt_xent + lam * regularizer`` on the 2N projections.

    Returns ``(total_tensor, LossBreakdown)``; the tensor is differentiable.
    """
    if z1.shape != z2.shape:
        raise DimensionError(f"view projections differ in shape: {z1.shape} vs {z2.shape}")
    if z1.shape[0] < 1:
        raise ContractError("need at least one positive pair")
    contrastive = nt_xent(ad.concat_rows([z1, z2]), config.temperature)
    if config.regularizer_kind == "none":
        return contrastive, LossBreakdown(contrastive.item(), 0.0, contrastive.item())
    reg = regularizer_batch(ad.normalize_rows(z1), ad.normalize_rows(z2), config)
    # lam == 0 keeps the regularizer out of the graph so the total is NT-Xent bit for bit
    total = ad.add(contrastive, ad.scale(reg, config.lam)) if config.lam != 0 else contrastive
    return total, LossBreakdown(contrastive.item(), reg.item(), total.item())

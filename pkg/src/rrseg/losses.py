"""Training objectives: soft Dice, cross-correlation redundancy reduction,
and the combined twin loss.

The cross-correlation matrix between the two twins' embeddings uses pure
cosine column normalisation (no mean centering by default; flip
`center_embeddings` to subtract per-column means first).  The redundancy
loss drives that matrix toward identity: the diagonal term rewards
invariance of each embedding dimension across the twins, the off-diagonal
term penalises correlation between different dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import errors

DEFAULT_LAMBDA = 0.005
DICE_EPS = 1e-5


def soft_dice_loss(p_pred: ad.Tensor, p_true: ad.Tensor, eps: float = DICE_EPS) -> ad.Tensor:
    """1 - 2*sum(t*p) / (sum(t^2) + sum(p^2) + eps), per channel then averaged.

    `p_pred` holds per-class probabilities, `p_true` the binary target.
    """
    if p_pred.shape != p_true.shape:
        raise errors.ShapeMismatch(f"dice: pred {p_pred.shape} vs truth {p_true.shape}")
    if p_pred.data.ndim != 4:
        raise errors.ShapeMismatch(f"dice expects [C,D,H,W], got {p_pred.shape}")
    spatial = (1, 2, 3)
    inter = ad.tsum(ad.mul(p_true, p_pred), axis=spatial)
    denom = ad.add(
        ad.tsum(ad.mul(p_true, p_true), axis=spatial),
        ad.tsum(ad.mul(p_pred, p_pred), axis=spatial),
    ) + eps
    per_class = 1.0 - ad.div(ad.scale(inter, 2.0), denom)
    return ad.tmean(per_class)


def cross_correlation(za: ad.Tensor, zb: ad.Tensor,
                      center_embeddings: bool = False) -> ad.Tensor:
    """Empirical cross-correlation matrix C[i,j] between embedding columns.

    Rows index the twin batch (pooled spatial regions), columns the embedding
    dimension; every entry is a cosine in [-1, 1].  A column whose norm falls
    under 1e-12 signals collapsed features and raises DegenerateColumn.
    """
    if za.data.ndim != 2 or za.shape != zb.shape:
        raise errors.ShapeMismatch(f"cross_correlation: {za.shape} vs {zb.shape}")
    rows = za.shape[0]
    if rows < 2:
        raise errors.ShapeMismatch(f"cross_correlation needs >= 2 rows, got {rows}")
    if center_embeddings:
        ones = ad.constant(np.ones((rows, 1), za.dtype))
        za = ad.sub(za, ad.matmul(ones, ad.reshape(ad.tmean(za, axis=0), (1, -1))))
        zb = ad.sub(zb, ad.matmul(ones, ad.reshape(ad.tmean(zb, axis=0), (1, -1))))
    na = ad.sqrt(ad.tsum(ad.mul(za, za), axis=0))
    nb = ad.sqrt(ad.tsum(ad.mul(zb, zb), axis=0))
    for name, n in (("zA", na), ("zB", nb)):
        if float(n.data.min()) < 1e-12:
            cols = np.flatnonzero(n.data < 1e-12).tolist()
            raise errors.DegenerateColumn(f"{name} columns {cols} have (near-)zero norm")
    zan = ad.scale_columns(za, 1.0 / na)
    zbn = ad.scale_columns(zb, 1.0 / nb)
    return ad.matmul(ad.transpose(zan), zbn)


def _bt_terms(c: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    n = c.shape[0]
    eye = ad.constant(np.eye(n, dtype=c.dtype))
    off = ad.constant(np.ones((n, n), c.dtype) - np.eye(n, dtype=c.dtype))
    diag_dev = ad.mul(1.0 - c, eye)
    invariance = ad.tsum(ad.mul(diag_dev, diag_dev))
    redundancy = ad.tsum(ad.mul(ad.mul(c, c), off))
    return invariance, redundancy


def barlow_twins_loss(c: ad.Tensor, lam: float = DEFAULT_LAMBDA) -> ad.Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    if c.data.ndim != 2 or c.shape[0] != c.shape[1]:
        raise errors.ShapeMismatch(f"cross-correlation matrix must be square, got {c.shape}")
    invariance, redundancy = _bt_terms(c)
    return ad.add(invariance, ad.scale(redundancy, lam))


@dataclass
class LossBreakdown:
    """Scalar tensors for every component of one twin-pair training step."""

    dice: ad.Tensor
    invariance: ad.Tensor
    redundancy: ad.Tensor
    bt: ad.Tensor
    total: ad.Tensor
    lam: float
    bt_weight: float

    def values(self) -> dict[str, float]:
        return {
            "dice": self.dice.item(),
            "invariance": self.invariance.item(),
            "redundancy": self.redundancy.item(),
            "bt": self.bt.item(),
            "total": self.total.item(),
        }


def total_loss(seg_a: ad.Tensor, seg_b: ad.Tensor,
               true_a: ad.Tensor, true_b: ad.Tensor,
               za: ad.Tensor, zb: ad.Tensor,
               lam: float = DEFAULT_LAMBDA, bt_weight: float = 1.0,
               eps: float = DICE_EPS,
               center_embeddings: bool = False) -> LossBreakdown:
    """Combined objective for one twin pair.

    Dice is averaged over the two twins against their own (identically
    spatially transformed) targets.  With bt_weight == 0 the redundancy terms
    are still reported but contribute nothing to `total` and no gradient
    flows through the projection branch.
    """
    dice = ad.scale(ad.add(soft_dice_loss(seg_a, true_a, eps),
                           soft_dice_loss(seg_b, true_b, eps)), 0.5)
    c = cross_correlation(za, zb, center_embeddings=center_embeddings)
    invariance, redundancy = _bt_terms(c)
    bt = ad.add(invariance, ad.scale(redundancy, lam))
    total = dice if bt_weight == 0.0 else ad.add(dice, ad.scale(bt, bt_weight))
    return LossBreakdown(dice=dice, invariance=invariance, redundancy=redundancy,
                         bt=bt, total=total, lam=lam, bt_weight=bt_weight)

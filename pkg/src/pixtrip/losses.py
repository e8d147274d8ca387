"""Segmentation losses (CE, Dice, Focal), the IS-Triplet loss and their combination.

Probability and logit maps are ``[2,H,W]`` (channel 1 = foreground) or a
stack ``[N,2,H,W]``; masks are ``[H,W]`` / ``[N,H,W]`` with values in {0, 1}.
Stacked inputs give the mean of the per-image losses.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import channel, softmax_channel
from .sampler import SampleSets, rowwise_sq_dist
from .tensor import ShapeError, Tensor

LOG_FLOOR = 1e-12
SEG_LOSSES = ("ce", "dice", "focal")


@dataclass(frozen=True)
class LossConfig:
    margin_m: float = 3.0
    lambda0: float = 1.0
    lambda_decay: float = 0.85
    K: int = 5000
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    seg_loss_kind: str = "dice"
    use_is_triplet: bool = True

    def __post_init__(self):
        if self.margin_m < 0:
            raise ValueError("margin_m must be >= 0")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if not 0 < self.lambda_decay <= 1:
            raise ValueError("lambda_decay must be in (0, 1]")
        if self.K < 1:
            raise ValueError("K must be a positive integer")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.seg_loss_kind not in SEG_LOSSES:
            raise ValueError(f"seg_loss_kind must be one of {SEG_LOSSES}, got {self.seg_loss_kind!r}")

    def lambda_at(self, epoch: int) -> float:
        return self.lambda0 * self.lambda_decay**epoch


def _mask_array(mask, probs: Tensor) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    spatial = probs.shape[:1] + probs.shape[2:] if probs.ndim == 4 else probs.shape[1:]
    if probs.ndim not in (3, 4) or probs.shape[-3] != 2:
        raise ShapeError(f"expected a [2,H,W] or [N,2,H,W] map, got {probs.shape}")
    if m.shape != spatial:
        raise ShapeError(f"mask shape {m.shape} does not match prediction shape {probs.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0/1)")
    return m


def _true_class_prob(probs: Tensor, m: np.ndarray) -> Tensor:
    return channel(probs, 1) * m + channel(probs, 0) * (1.0 - m)


def focal_loss(probs, mask, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of ``(1 - p_t)**gamma * -log(p_t)``."""
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    probs = T.as_tensor(probs)
    m = _mask_array(mask, probs)
    p_t = _true_class_prob(probs, m)
    nll = T.scale(T.log(p_t, floor=LOG_FLOOR), -1.0)
    return T.reduce("mean", T.power(1.0 - p_t, gamma) * nll)


def cross_entropy_loss(logits, mask) -> Tensor:
    """Mean over pixels of ``-log softmax(logits)[true class]``."""
    # same arithmetic path as focal with gamma=0, so the two agree bit-for-bit
    return focal_loss(softmax_channel(logits), mask, 0.0)


def dice_loss(probs, mask, smooth: float = 1.0) -> Tensor:
    """``1 - (2 sum(p*m) + s) / (sum(p) + sum(m) + s)`` on the foreground channel."""
    if smooth <= 0:
        raise ValueError("dice smooth must be > 0")
    probs = T.as_tensor(probs)
    m = _mask_array(mask, probs)
    p = channel(probs, 1)
    axes = (-2, -1)
    inter = T.reduce("sum", p * m, axis=axes)
    denom = T.reduce("sum", p, axis=axes) + (m.sum(axis=axes) + smooth)
    score = (T.scale(inter, 2.0) + smooth) / denom
    return T.reduce("mean", 1.0 - score)


def triplet_loss_single(anchor, positive, negative, m: float) -> Tensor:
    """``[|a-p|^2 + m - |a-n|^2]_+`` for one triplet of ``[D]`` vectors."""
    a, p, n = T.as_tensor(anchor), T.as_tensor(positive), T.as_tensor(negative)
    if not (a.shape == p.shape == n.shape) or a.ndim != 1:
        raise ShapeError(f"triplet: need equal [D] vectors, got {a.shape}, {p.shape}, {n.shape}")
    d_ap = T.reduce("sum", T.square(a - p))
    d_an = T.reduce("sum", T.square(a - n))
    return T.relu(d_ap + float(m) - d_an)


def is_triplet_loss(sets: SampleSets, m: float) -> Tensor:
    """Pixel triplet loss over row-aligned sample sets.

    Foreground anchors (F1 vs F2 against B1) and background anchors (B1 vs
    B2 against F2) each give ``K_eff`` hinge terms on squared distances; the
    result is half the sum of the two per-term means.
    """
    if sets is None or sets.k_eff < 1:
        raise ValueError("is_triplet_loss needs at least one sampled row per set")
    m = float(m)
    loss1 = T.relu(rowwise_sq_dist(sets.F1, sets.F2) - rowwise_sq_dist(sets.F1, sets.B1) + m)
    loss2 = T.relu(rowwise_sq_dist(sets.B1, sets.B2) - rowwise_sq_dist(sets.B1, sets.F2) + m)
    return T.scale(T.reduce("mean", loss1) + T.reduce("mean", loss2), 0.5)


def combined_loss(seg, ist, lam: float) -> Tensor:
    """``seg + lam * ist``."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    seg, ist = T.as_tensor(seg), T.as_tensor(ist)
    if seg.ndim != 0 or ist.ndim != 0:
        raise ShapeError(f"combined_loss: both terms must be scalars, got {seg.shape} and {ist.shape}")
    return seg + T.scale(ist, lam)


def segmentation_loss(logits, mask, config: LossConfig) -> Tensor:
    """The configured segmentation loss on a logit map."""
    if config.seg_loss_kind == "ce":
        return cross_entropy_loss(logits, mask)
    probs = softmax_channel(logits)
    if config.seg_loss_kind == "dice":
        return dice_loss(probs, mask, config.dice_smooth)
    return focal_loss(probs, mask, config.focal_gamma)

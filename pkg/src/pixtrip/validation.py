"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import ImagePair


def check_image(image, name: str = "image") -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"{name} must be [C,H,W], got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x


def check_mask(mask, shape: tuple[int, int] | None = None, name: str = "mask") -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"{name} must be [H,W], got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ValueError(f"{name} is {m.shape[1]}x{m.shape[0]}, expected {shape[1]}x{shape[0]}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return m.astype(np.uint8)


def check_pair(pair: ImagePair, require_masks: bool = True) -> ImagePair:
    a = check_image(pair.image_a, "image_a")
    b = check_image(pair.image_b, "image_b")
    if a.shape != b.shape:
        raise ValueError(f"pair images differ in shape: {a.shape} vs {b.shape}")
    if not require_masks:
        return ImagePair(a, b, pair.mask_a, pair.mask_b, pair.class_id)
    ma = check_mask(pair.mask_a, a.shape[1:], "mask_a")
    mb = check_mask(pair.mask_b, b.shape[1:], "mask_b")
    return ImagePair(a, b, ma, mb, pair.class_id)


def check_pairs(pairs: Sequence[ImagePair], require_masks: bool = True, divisor: int = 1) -> list[ImagePair]:
    """Validate a non-empty list of equally sized pairs."""
    if isinstance(pairs, ImagePair):
        pairs = [pairs]
    pairs = [check_pair(p, require_masks) for p in pairs]
    if not pairs:
        raise ValueError("expected at least one image pair")
    shape = pairs[0].image_a.shape
    for i, p in enumerate(pairs):
        if p.image_a.shape != shape:
            raise ValueError(f"pair {i} has shape {p.image_a.shape}, pair 0 has {shape}")
    h, w = shape[1:]
    if h % divisor or w % divisor:
        raise ValueError(f"image size {h}x{w} must be divisible by {divisor}")
    return pairs

"""Balanced foreground/background pixel sampling for the IS-Triplet loss.

Four sets of pixel embeddings are drawn from one image: ``F1`` and ``F2``
from the foreground, ``B1`` and ``B2`` from the background. Each set is a
uniform draw without replacement; the sets are drawn independently of each
other, so ``F1`` and ``F2`` may share pixels. All four have ``K_eff`` rows,
``K_eff = min(K, #foreground, #background)``, and row ``i`` of each set
together forms the ``i``-th pair of triplets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, reduce, square, sub, take, transpose, reshape


@dataclass
class SampleSets:
    F1: Tensor
    F2: Tensor
    B1: Tensor
    B2: Tensor
    # flat pixel indices of each row, keyed like the matrices
    pixels: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def k_eff(self) -> int:
        return self.F1.shape[0]

    @property
    def dim(self) -> int:
        return self.F1.shape[1]

    def coords(self, name: str, width: int) -> np.ndarray:
        """``(row, col)`` image coordinates of the rows of set ``name``."""
        idx = self.pixels[name]
        return np.stack([idx // width, idx % width], axis=1)


def pixel_seed(global_seed: int, epoch: int, image_index: int) -> np.random.SeedSequence:
    """Per-image RNG stream, independent of data order."""
    return np.random.SeedSequence([int(global_seed), int(epoch), int(image_index)])


def rowwise_sq_dist(a, b) -> Tensor:
    """Squared Euclidean distance between matching rows of two ``K x D`` matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"rowwise_sq_dist: need equal K x D shapes, got {a.shape} and {b.shape}")
    return reduce("sum", square(sub(a, b)), axis=1)


def _as_mask(mask, shape: tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match embedding spatial shape {shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0/1)")
    return m.astype(bool)


def sample_pixel_sets(embedding, mask, K: int, rng_seed) -> SampleSets | None:
    """Draw ``F1, F2, B1, B2`` from a ``[D,H,W]`` embedding map.

    Returns ``None`` when the mask has no foreground or no background pixel:
    the triplet term cannot be formed for that image and the caller drops it.
    Rows stay attached to the graph, so gradients reach ``embedding``.
    """
    emb = as_tensor(embedding)
    if emb.ndim != 3:
        raise ShapeError(f"embedding must be [D,H,W], got {emb.shape}")
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    d, h, w = emb.shape
    m = _as_mask(mask, (h, w)).reshape(-1)
    fg, bg = np.flatnonzero(m), np.flatnonzero(~m)
    if fg.size == 0 or bg.size == 0:
        return None
    k_eff = min(K, fg.size, bg.size)

    rng = np.random.default_rng(rng_seed)
    pixels = {
        "F1": fg[rng.choice(fg.size, k_eff, replace=False)],
        "F2": fg[rng.choice(fg.size, k_eff, replace=False)],
        "B1": bg[rng.choice(bg.size, k_eff, replace=False)],
        "B2": bg[rng.choice(bg.size, k_eff, replace=False)],
    }
    flat = reshape(emb, (d, h * w))
    rows = {name: transpose(take(flat, idx, axis=1)) for name, idx in pixels.items()}
    return SampleSets(pixels=pixels, **rows)

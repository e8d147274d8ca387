"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6, coords=None) -> float:
    """Max relative error between backward() and central differences.

    The error at each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``coords`` restricts the check to some flat indices of ``point``.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    fn(x).backward()
    analytic = np.zeros(base.shape) if x.grad is None else x.grad

    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in coords:
        hi, lo = flat.copy(), flat.copy()
        hi[i] += eps
        lo[i] -= eps
        f_hi = fn(Tensor(hi.reshape(base.shape))).item()
        f_lo = fn(Tensor(lo.reshape(base.shape))).item()
        numeric = (f_hi - f_lo) / (2.0 * eps)
        worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
    return worst


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int,
    rng: np.random.Generator,
    eps: float = 1e-6,
) -> float:
    """Like :func:`grad_check` but over randomly chosen entries of many leaves.

    ``loss_fn`` rebuilds the graph from the current ``params`` on each call.
    Parameter data is restored afterwards.
    """
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    flat_ids = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for fid in flat_ids:
        which = int(np.searchsorted(offsets, fid, side="right") - 1)
        p, j = params[which], int(fid - offsets[which])
        orig = p.data
        vals = []
        for step in (eps, -eps):
            d = orig.copy().reshape(-1)
            d[j] += step
            p.data = d.reshape(orig.shape)
            vals.append(loss_fn().item())
        p.data = orig
        numeric = (vals[0] - vals[1]) / (2.0 * eps)
        worst = max(worst, float(relative_error(analytic[which].reshape(-1)[j], numeric)))
    for p in params:
        p.zero_grad()
    return worst

"""Convolutional building blocks on top of :mod:`pixtrip.tensor`.

Spatial ops take ``[C, H, W]`` or a stack ``[N, C, H, W]``. Stacked samples
never mix: each sample's matrix product is an independent GEMM call, so a
sample's result does not depend on its position in the stack.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor


def _as_stack(x: Tensor, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{name}: expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: (size {size} + 2*padding {padding} - k {k}) / stride {stride} is not a whole number"
        )
    return span // stride + 1


def conv2d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``kernels`` is ``[C_out, C_in, k, k]`` with odd ``k``; ``bias`` is ``[C_out]``.
    """
    x, w = as_tensor(x), as_tensor(kernels)
    xs, squeeze = _as_stack(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernels must be [C_out,C_in,k,k], got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    n, c, h, wd = xs.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernels expect {c_in}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)

    xp = np.pad(xs, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xs
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c_in * k * k, ho * wo)
    w2 = w.data.reshape(c_out, c_in * k * k)
    out = np.matmul(w2, cols).reshape(n, c_out, ho, wo)
    parents = [x, w]
    if bias is not None:
        b = as_tensor(bias)
        if b.shape != (c_out,):
            raise ShapeError(f"conv2d: bias must be [{c_out}], got {b.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gs = g[None] if squeeze else g
        gflat = gs.reshape(n, c_out, ho * wo)
        gx = gw = None
        if w.requires_grad:
            gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, gflat).reshape(n, c_in, k, k, ho, wo)
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            gx = dxp[0] if squeeze else dxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gs.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._from_op(out[0] if squeeze else out, parents, backward, "conv2d")


def _bilinear_matrix(n: int) -> np.ndarray:
    # half-pixel centres, edge-clamped: out[2i] = .25 x[i-1] + .75 x[i]; out[2i+1] = .75 x[i] + .25 x[i+1]
    m = np.zeros((2 * n, n))
    for i in range(n):
        m[2 * i, max(i - 1, 0)] += 0.25
        m[2 * i, i] += 0.75
        m[2 * i + 1, i] += 0.75
        m[2 * i + 1, min(i + 1, n - 1)] += 0.25
    return m


def upsample2x(x, mode: str = "nearest") -> Tensor:
    """Double both spatial dims of ``[..., H, W]`` by ``nearest`` or ``bilinear``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample2x: need spatial dims, got {x.shape}")
    h, w = x.shape[-2:]
    if mode == "nearest":
        out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            return (g.reshape(*g.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1)),)

    elif mode == "bilinear":
        uh, uw = _bilinear_matrix(h), _bilinear_matrix(w)
        out = uh @ x.data @ uw.T

        def backward(g):
            return (uh.T @ g @ uw,)

    else:
        raise ValueError(f"upsample2x: unknown mode {mode!r}")
    return Tensor._from_op(out, (x,), backward, f"upsample_{mode}")


def avg_pool2x(x) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x: spatial dims must be even, got {h}x{w}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return Tensor._from_op(out, (x,), backward, "avg_pool2x")


def softmax_channel(logits) -> Tensor:
    """Softmax over the channel axis of ``[C,H,W]`` or ``[N,C,H,W]``."""
    z = as_tensor(logits)
    if z.ndim not in (3, 4):
        raise ShapeError(f"softmax_channel: expected [C,H,W] or [N,C,H,W], got {z.shape}")
    ax = z.ndim - 3
    e = np.exp(z.data - z.data.max(axis=ax, keepdims=True))
    p = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return Tensor._from_op(p, (z,), backward, "softmax")


def channel(x, index: int) -> Tensor:
    """Select one channel of ``[C,H,W]`` / ``[N,C,H,W]``, dropping the axis."""
    x = as_tensor(x)
    return x[index] if x.ndim == 3 else x[:, index]

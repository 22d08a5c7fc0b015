"""Dense, convolution and pooling layers with hand-written backward passes.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Arrays keep whatever float dtype they arrive in, so
the same code runs in float32 for training and float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import ShapeError

ACTIVATIONS = ("identity", "relu", "sigmoid")


def sigmoid(x):
    return expit(x)


def relu(x):
    return np.maximum(x, 0)


def dense_forward(x, W, b, activation="identity"):
    """``act(x @ W.T + b)``; ``x`` is ``(n,)`` or ``(N, n)``, ``W`` is ``(m, n)``."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with W {W.shape} / b {b.shape}")
    z = x @ W.T + b
    if activation == "relu":
        out = relu(z)
    elif activation == "sigmoid":
        out = sigmoid(z)
    else:
        out = z
    return out, (x, W, z, out, activation)


def dense_backward(dout, cache):
    x, W, z, out, activation = cache
    if activation == "relu":
        dz = dout * (z > 0)
    elif activation == "sigmoid":
        dz = dout * out * (1 - out)
    else:
        dz = dout
    dx = dz @ W
    x2 = x.reshape(-1, x.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    dW = dz2.T @ x2
    db = dz2.sum(axis=0)
    return dx, dW, db


def _im2col(x, k):
    # (N, H, W, C) -> (N * Ho * Wo, k * k * C), patch layout (di, dj, c)
    n, h, w, c = x.shape
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (N, Ho, Wo, C, k, k)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(n * (h - k + 1) * (w - k + 1), k * k * c)


def conv2d_forward(x, kernels, b):
    """Valid, stride-1 cross-correlation.

    ``x``: ``(H, W, C)`` or ``(N, H, W, C)``; ``kernels``: ``(k, k, C, F)``;
    output ``(..., H-k+1, W-k+1, F)``.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d: kernels must be (k, k, C, F), got {kernels.shape}")
    k, _, c, f = kernels.shape
    n, h, w, cx = xb.shape
    if cx != c:
        raise ShapeError(f"conv2d: input has {cx} channels, kernels expect {c}")
    if k > h or k > w:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than input {h}x{w}")
    if b.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
    ho, wo = h - k + 1, w - k + 1
    cols = _im2col(xb, k)
    out = (cols @ kernels.reshape(k * k * c, f) + b).reshape(n, ho, wo, f)
    return (out[0] if single else out), (x, kernels)


def _row_strips(x, k):
    # (N, H, W, C) -> (N, H, Wo, k, C): column-direction patches only
    n, h, w, c = x.shape
    wo = w - k + 1
    strip = np.empty((n, h, wo, k, c), dtype=x.dtype)
    for j in range(k):
        strip[:, :, :, j, :] = x[:, :, j:j + wo, :]
    return strip


def conv2d_backward(dout, cache, need_dx=True):
    """Returns ``(dx, dkernels, db)``; ``dx`` is None when ``need_dx`` is false.

    Works on row strips (one im2col pass along the width, a matmul per kernel
    row) which keeps temporaries k times smaller than a full im2col.
    """
    x, kernels = cache
    single = x.ndim == 3
    xb = x[None] if single else x
    db_ = dout[None] if single else dout
    k, _, c, f = kernels.shape
    n, h, w, _ = xb.shape
    ho, wo = h - k + 1, w - k + 1
    d2 = db_.reshape(-1, f)
    strip = _row_strips(xb, k)
    dW = np.empty_like(kernels)
    for i in range(k):
        dW[i] = (strip[:, i:i + ho].reshape(-1, k * c).T @ d2).reshape(k, c, f)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dstrip = np.zeros_like(strip)
        for i in range(k):
            dstrip[:, i:i + ho] += (d2 @ kernels[i].reshape(k * c, f).T).reshape(n, ho, wo, k, c)
        dxb = np.zeros_like(xb)
        for j in range(k):
            dxb[:, :, j:j + wo, :] += dstrip[:, :, :, j, :]
        dx = dxb[0] if single else dxb
    return dx, dW, db


def conv2d_naive(x, kernels, b):
    """Quadruple-loop reference used as a test oracle."""
    k, _, c, f = kernels.shape
    h, w, _ = x.shape
    out = np.zeros((h - k + 1, w - k + 1, f), dtype=np.float64)
    for r in range(h - k + 1):
        for s in range(w - k + 1):
            for o in range(f):
                acc = float(b[o])
                for i in range(k):
                    for j in range(k):
                        for ch in range(c):
                            acc += float(x[r + i, s + j, ch]) * float(kernels[i, j, ch, o])
                out[r, s, o] = acc
    return out


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max; ties go to the first element in row-major order.

    The winner is chosen row first (top row on ties), then column (left on
    ties), which is the same as the first maximal element in row-major order.
    The cache keeps those three choices as quarter-size boolean maps.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extent {h}x{w} must be even")
    v = xb.reshape(n, h // 2, 2, w // 2, 2, c)
    q00, q01, q10, q11 = v[:, :, 0, :, 0], v[:, :, 0, :, 1], v[:, :, 1, :, 0], v[:, :, 1, :, 1]
    left0 = q00 >= q01
    left1 = q10 >= q11
    m0 = np.maximum(q00, q01)
    m1 = np.maximum(q10, q11)
    top = m0 >= m1
    out = np.maximum(m0, m1)
    return (out[0] if single else out), (x.shape, top, left0, left1)


def maxpool2x2_backward(dout, cache):
    shape, top, left0, left1 = cache
    single = len(shape) == 3
    d = dout[None] if single else dout
    n, hh, ww, c = d.shape
    dx = np.empty((n, hh, 2, ww, 2, c), dtype=d.dtype)
    g0 = d * top
    g1 = d - g0
    t = g0 * left0
    dx[:, :, 0, :, 0] = t
    dx[:, :, 0, :, 1] = g0 - t
    t = g1 * left1
    dx[:, :, 1, :, 0] = t
    dx[:, :, 1, :, 1] = g1 - t
    dx = dx.reshape(n, hh * 2, ww * 2, c)
    return dx[0] if single else dx


def relu_forward(x):
    return relu(x), x


def relu_backward(dout, cache):
    return dout * (cache > 0)

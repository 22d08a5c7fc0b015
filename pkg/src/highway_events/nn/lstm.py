"""LSTM cell (forget gate, no peepholes) with backpropagation through time.

Weights ``W`` have shape ``(4h, n + h)`` acting on ``[x, h_prev]``; the
gate blocks are ordered input, forget, output, candidate.
"""
from __future__ import annotations

import numpy as np

from .core import ShapeError
from .layers import sigmoid


def _split(W, n):
    return W[:, :n], W[:, n:]


def _check(x, h, W, b):
    hid = W.shape[0] // 4
    if W.shape[0] != 4 * hid or W.shape[1] != x.shape[-1] + hid or b.shape != (4 * hid,) or h.shape[-1] != hid:
        raise ShapeError(f"lstm: x {x.shape}, h {h.shape} incompatible with W {W.shape} / b {b.shape}")
    return hid


def _gates(z, hid):
    i = sigmoid(z[..., :hid])
    f = sigmoid(z[..., hid:2 * hid])
    o = sigmoid(z[..., 2 * hid:3 * hid])
    g = np.tanh(z[..., 3 * hid:])
    return i, f, o, g


def lstm_step(x, h, c, W, b):
    """One time step; returns ``(h_next, c_next)``."""
    hid = _check(x, h, W, b)
    Wx, Wh = _split(W, x.shape[-1])
    z = x @ Wx.T + h @ Wh.T + b
    i, f, o, g = _gates(z, hid)
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    return h_next, c_next


def lstm_forward(xs, W, b, h0=None, c0=None):
    """Run a whole sequence ``xs`` of shape ``(T, n)``; returns ``(hs, cache)``."""
    t_len, n = xs.shape
    hid = W.shape[0] // 4
    h = np.zeros(hid, dtype=xs.dtype) if h0 is None else h0
    c = np.zeros(hid, dtype=xs.dtype) if c0 is None else c0
    _check(xs[0], h, W, b)
    Wx, Wh = _split(W, n)
    zx = xs @ Wx.T + b

    hs = np.empty((t_len, hid), dtype=xs.dtype)
    cs = np.empty((t_len, hid), dtype=xs.dtype)
    gates = np.empty((t_len, 4, hid), dtype=xs.dtype)
    h_prev = np.empty((t_len, hid), dtype=xs.dtype)
    c_prev = np.empty((t_len, hid), dtype=xs.dtype)
    for t in range(t_len):
        h_prev[t] = h
        c_prev[t] = c
        i, f, o, g = _gates(zx[t] + h @ Wh.T, hid)
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[t] = (i, f, o, g)
        hs[t] = h
        cs[t] = c
    return hs, (xs, W, hs, cs, gates, h_prev, c_prev)


def lstm_backward(dhs, cache):
    """BPTT over the full sequence; returns ``(dxs, dW, db)``."""
    xs, W, hs, cs, gates, h_prev, c_prev = cache
    t_len, n = xs.shape
    hid = hs.shape[1]
    Wx, Wh = _split(W, n)
    dz = np.empty((t_len, 4 * hid), dtype=hs.dtype)
    dh_next = np.zeros(hid, dtype=hs.dtype)
    dc_next = np.zeros(hid, dtype=hs.dtype)
    for t in range(t_len - 1, -1, -1):
        i, f, o, g = gates[t]
        tc = np.tanh(cs[t])
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev[t]
        dc_next = dc * f
        dzt = dz[t]
        dzt[:hid] = di * i * (1 - i)
        dzt[hid:2 * hid] = df * f * (1 - f)
        dzt[2 * hid:3 * hid] = do * o * (1 - o)
        dzt[3 * hid:] = dg * (1 - g * g)
        dh_next = dzt @ Wh
    dxs = dz @ Wx
    dW = np.concatenate([dz.T @ xs, dz.T @ h_prev], axis=1)
    db = dz.sum(axis=0)
    return dxs, dW, db

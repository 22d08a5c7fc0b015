"""Class-weighted binary cross-entropy over the four event scores.

Per frame ``L_t = sum_h w_h * (-y_h log p_h) - (1 - y_h) log(1 - p_h)``;
a clip's loss is the sum over its frames.
"""
from __future__ import annotations

import numpy as np

DEFAULT_LOSS_WEIGHTS = (10.0, 40.0, 30.0, 100.0)
P_CLAMP = 1e-7


def check_loss_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (4,) or np.any(w <= 0):
        raise ValueError(f"loss weights must be 4 positive values, got {w}")
    return w


def weighted_bce(p, y, w=DEFAULT_LOSS_WEIGHTS):
    """Loss and ``dL/dp`` from probabilities ``p`` (clamped to [1e-7, 1 - 1e-7]).

    ``p`` and ``y`` are ``(4,)`` or ``(T, 4)``. The gradient is zero where the
    clamp is active.
    """
    w = check_loss_weights(w)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    loss = np.sum(w * (-y * np.log(pc)) - (1 - y) * np.log(1 - pc))
    grad = -w * y / pc + (1 - y) / (1 - pc)
    grad = np.where((p >= P_CLAMP) & (p <= 1 - P_CLAMP), grad, 0.0)
    return float(loss), grad


def _softplus(x):
    return np.logaddexp(0.0, x)


def weighted_bce_with_logits(z, y, w=DEFAULT_LOSS_WEIGHTS):
    """Same loss evaluated from logits ``z`` (``p = sigmoid(z)``); returns ``(loss, dL/dz)``.

    Uses ``-log p = softplus(-z)`` and ``-log(1 - p) = softplus(z)`` so the
    gradient never vanishes on saturated scores.
    """
    w = check_loss_weights(w)
    z64 = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = np.sum(w * y * _softplus(-z64) + (1 - y) * _softplus(z64))
    p = 1.0 / (1.0 + np.exp(-z64))
    grad = -w * y * (1 - p) + (1 - y) * p
    return float(loss), grad.astype(np.asarray(z).dtype, copy=False)

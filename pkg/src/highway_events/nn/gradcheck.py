"""Central finite-difference verification of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers
from .lstm import lstm_backward, lstm_forward
from .loss import weighted_bce_with_logits

STEP = 1e-5


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.abs(analytic)
    n = np.abs(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(a, n), 1e-8)


def numeric_gradient(loss_fn: Callable[[], float], array: np.ndarray, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + step
        fp = loss_fn()
        array[idx] = orig - step
        fm = loss_fn()
        array[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def grad_check(name: str, tensors: dict, loss_and_grads: Callable[[], tuple], step: float = STEP) -> GradCheckReport:
    """Compare analytic gradients from ``loss_and_grads() -> (loss, {name: grad})``
    against central differences for every array in ``tensors`` (perturbed in place).
    Arrays must be float64.
    """
    for key, arr in tensors.items():
        if arr.dtype != np.float64:
            raise TypeError(f"gradient checks need float64 tensors; {key} is {arr.dtype}")
    _, analytic = loss_and_grads()
    report = GradCheckReport(name, 0.0)
    for key, arr in tensors.items():
        numeric = numeric_gradient(lambda: loss_and_grads()[0], arr, step)
        err = float(relative_error(analytic[key], numeric).max()) if arr.size else 0.0
        report.per_tensor[key] = err
        report.max_rel_error = max(report.max_rel_error, err)
        report.n_checked += arr.size
    return report


# --- fragments -------------------------------------------------------------


def check_dense(seed: int, activation: str = "sigmoid") -> GradCheckReport:
    rng = np.random.default_rng(seed)
    n, m, batch = 5, 4, 3
    t = {"x": rng.normal(size=(batch, n)), "W": rng.normal(size=(m, n)), "b": rng.normal(size=m)}
    proj = rng.normal(size=(batch, m))

    def fn():
        out, cache = layers.dense_forward(t["x"], t["W"], t["b"], activation)
        dx, dW, db = layers.dense_backward(proj, cache)
        return float(np.sum(out * proj)), {"x": dx, "W": dW, "b": db}

    return grad_check(f"dense[{activation}]", t, fn)


def check_conv2d(seed: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    t = {"x": rng.normal(size=(6, 6, 2)), "K": rng.normal(size=(3, 3, 2, 2)), "b": rng.normal(size=2)}
    proj = rng.normal(size=(4, 4, 2))

    def fn():
        out, cache = layers.conv2d_forward(t["x"], t["K"], t["b"])
        dx, dK, db = layers.conv2d_backward(proj, cache)
        return float(np.sum(out * proj)), {"x": dx, "K": dK, "b": db}

    return grad_check("conv2d", t, fn)


def check_maxpool_composite(seed: int) -> GradCheckReport:
    """conv2d -> relu -> maxpool2x2."""
    rng = np.random.default_rng(seed)
    t = {"x": rng.normal(size=(7, 7, 2)), "K": rng.normal(size=(3, 3, 2, 3)), "b": rng.normal(size=3)}
    proj = rng.normal(size=(2, 2, 3))

    def fn():
        z, c1 = layers.conv2d_forward(t["x"], t["K"], t["b"])
        a, c2 = layers.relu_forward(z)
        p, c3 = layers.maxpool2x2_forward(a[:4, :4])
        da = np.zeros_like(a)
        da[:4, :4] = layers.maxpool2x2_backward(proj, c3)
        dx, dK, db = layers.conv2d_backward(layers.relu_backward(da, c2), c1)
        return float(np.sum(p * proj)), {"x": dx, "K": dK, "b": db}

    return grad_check("conv2d+relu+maxpool", t, fn)


def _lstm_tensors(rng, n=3, hid=4, steps=5):
    scale = 1.0 / np.sqrt(n + hid)
    return {
        "x": rng.normal(size=(steps, n)),
        "W": rng.uniform(-1, 1, size=(4 * hid, n + hid)) * 2 * scale,
        "b": rng.normal(scale=0.5, size=4 * hid),
    }


def check_lstm(seed: int, steps: int = 5) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    t = _lstm_tensors(rng, steps=steps)
    proj = rng.normal(size=(steps, 4))

    def fn():
        hs, cache = lstm_forward(t["x"], t["W"], t["b"])
        dx, dW, db = lstm_backward(proj, cache)
        return float(np.sum(hs * proj)), {"x": dx, "W": dW, "b": db}

    return grad_check(f"lstm[{steps} steps]", t, fn)


def check_lstm_loss(seed: int, steps: int = 5) -> GradCheckReport:
    """LSTM -> dense-4 logits -> weighted cross-entropy summed over frames."""
    rng = np.random.default_rng(seed)
    t = _lstm_tensors(rng, steps=steps)
    # moderate logits keep the summed loss O(10) so rounding noise stays below tiny true gradients
    t["Wp"] = rng.normal(scale=0.5, size=(4, 4))
    t["bp"] = rng.normal(scale=0.5, size=4)
    y = rng.random((steps, 4)) < 0.2

    def fn():
        hs, cache = lstm_forward(t["x"], t["W"], t["b"])
        z, hc = layers.dense_forward(hs, t["Wp"], t["bp"])
        loss, dz = weighted_bce_with_logits(z, y)
        dh, dWp, dbp = layers.dense_backward(dz, hc)
        dx, dW, db = lstm_backward(dh, cache)
        return loss, {"x": dx, "W": dW, "b": db, "Wp": dWp, "bp": dbp}

    return grad_check(f"lstm[{steps} steps]+weighted_bce", t, fn)


FRAGMENTS = {
    "dense": check_dense,
    "conv2d": check_conv2d,
    "maxpool": check_maxpool_composite,
    "lstm": check_lstm,
    "lstm_bce": check_lstm_loss,
}


def run_all(seeds=range(20)) -> dict[str, list[GradCheckReport]]:
    return {name: [fn(s) for s in seeds] for name, fn in FRAGMENTS.items()}

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: gradient shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def size(self) -> int:
        return self.value.size


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_std(fan_in: int, cap: float = 0.1) -> float:
    # std 0.1, reduced to He scaling for wide layers (e.g. the 32k-input dense layer)
    return min(cap, float(np.sqrt(2.0 / fan_in)))

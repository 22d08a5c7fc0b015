"""Adaptive per-pixel Gaussian-mixture background subtraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clips import MalformedInputError


@dataclass(frozen=True)
class BackgroundParams:
    n_components: int = 3
    learning_rate: float = 0.002
    match_threshold: float = 2.5
    background_ratio: float = 0.7
    initial_variance: float = 15.0**2
    variance_floor: float = 4.0**2
    initial_weight: float | None = None  # weight of a freshly spawned component; None -> learning_rate

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError("learning_rate must lie in (0, 1)")
        if self.match_threshold <= 0:
            raise ValueError("match_threshold must be positive")
        if not 0.0 < self.background_ratio < 1.0:
            raise ValueError("background_ratio must lie in (0, 1)")
        if self.variance_floor <= 0 or self.initial_variance < self.variance_floor:
            raise ValueError("need 0 < variance_floor <= initial_variance")

    @property
    def spawn_weight(self) -> float:
        return self.learning_rate if self.initial_weight is None else self.initial_weight


class BackgroundState:
    """Mixture grid of shape ``(H, W, K)`` for means, variances and weights."""

    def __init__(self, mean: np.ndarray, var: np.ndarray, weight: np.ndarray, params: BackgroundParams):
        self.mean = mean
        self.var = var
        self.weight = weight
        self.params = params

    @property
    def shape(self):
        return self.mean.shape[:2]

    def copy(self) -> "BackgroundState":
        return BackgroundState(self.mean.copy(), self.var.copy(), self.weight.copy(), self.params)


def bg_init(first_frame: np.ndarray, params: BackgroundParams = BackgroundParams()) -> BackgroundState:
    frame = np.asarray(first_frame, dtype=np.float64)
    if frame.ndim != 2:
        raise MalformedInputError(f"expected a 2-D frame, got shape {frame.shape}")
    h, w = frame.shape
    k = params.n_components
    mean = np.zeros((h, w, k))
    mean[..., 0] = frame
    var = np.full((h, w, k), float(params.initial_variance))
    weight = np.zeros((h, w, k))
    weight[..., 0] = 1.0
    return BackgroundState(mean, var, weight, params)


def bg_update(state: BackgroundState, frame: np.ndarray) -> np.ndarray:
    """Classify ``frame`` against the current model, then adapt the model.

    Returns a uint8 mask with 1 at foreground pixels. ``state`` is modified
    in place.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.shape != state.shape:
        raise MalformedInputError(f"frame shape {x.shape} does not match background model {state.shape}")
    p = state.params
    mean, var, weight = state.mean, state.var, state.weight
    k = p.n_components

    sigma = np.sqrt(var)
    active = weight > 0
    diff = x[..., None] - mean
    match = active & (np.abs(diff) < p.match_threshold * sigma)

    # rank components by fitness w / sigma (inactive ones last)
    fitness = np.where(active, weight / sigma, -1.0)
    order = np.argsort(-fitness, axis=-1, kind="stable")
    rank = np.argsort(order, axis=-1, kind="stable")
    sorted_w = np.take_along_axis(weight, order, axis=-1)
    cum = np.cumsum(sorted_w, axis=-1)
    # B = number of leading components whose cumulative weight first exceeds T
    n_bg = np.minimum(np.sum(cum <= p.background_ratio, axis=-1) + 1, k)

    # best-ranked matching component
    match_rank = np.where(match, rank, k)
    best_rank = match_rank.min(axis=-1)
    matched = best_rank < k
    background = matched & (best_rank < n_bg)

    best = np.take_along_axis(order, np.minimum(best_rank, k - 1)[..., None], axis=-1)[..., 0]
    hit = (np.arange(k) == best[..., None]) & matched[..., None]

    a = p.learning_rate
    weight *= 1.0 - a
    weight += a * hit
    mean += np.where(hit, a * diff, 0.0)
    var += np.where(hit, a * (diff * diff - var), 0.0)
    np.maximum(var, p.variance_floor, out=var)

    # no match: replace the weakest component
    spawn = ~matched
    if spawn.any():
        weakest = np.argmin(np.where(active, weight, -1.0), axis=-1)
        slot = (np.arange(k) == weakest[..., None]) & spawn[..., None]
        mean[slot] = np.broadcast_to(x[..., None], mean.shape)[slot]
        var[slot] = p.initial_variance
        weight[slot] = p.spawn_weight
    weight /= weight.sum(axis=-1, keepdims=True)

    return (~background).astype(np.uint8)


def foreground_masks(frames, params: BackgroundParams = BackgroundParams()) -> np.ndarray:
    """Masks for a frame sequence; the model is warm-started on the first frame."""
    frames = np.asarray(frames)
    state = bg_init(frames[0], params)
    return np.stack([bg_update(state, f) for f in frames])

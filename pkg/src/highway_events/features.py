"""Frame representations: motion feature vector, appearance and appearance+flow tensors.

Tensors are laid out ``(rows, cols, channels)``, i.e. ``(120, 160, C)`` for
160x120 frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .background import BackgroundParams, bg_init, bg_update
from .clips import MalformedInputError, apply_mask
from .flow import FlowField, FlowParams, estimate_flow

N_STRIPES = 4
NULL_MOTION = -1
FLOW_CLAMP = 8.0


@dataclass(frozen=True)
class QuantizerConfig:
    n_directions: int = 8
    n_levels: int = 4
    level_thresholds: tuple = (0.5, 2.0, 5.0, 10.0)

    def __post_init__(self):
        t = np.asarray(self.level_thresholds, dtype=np.float64)
        if len(t) != self.n_levels:
            raise ValueError("need one threshold per magnitude level")
        if t[0] <= 0 or np.any(np.diff(t) <= 0):
            raise ValueError("level thresholds must be positive and strictly ascending")
        if self.n_directions * self.n_levels != 32:
            raise ValueError("n_directions * n_levels must be 32")

    @property
    def null_motion_epsilon(self) -> float:
        return float(self.level_thresholds[0])

    @property
    def n_bins(self) -> int:
        return self.n_directions * self.n_levels


def quantize_flow(vx, vy, q: QuantizerConfig = QuantizerConfig()) -> np.ndarray:
    """Vectorised quantizer: bin index per element, ``NULL_MOTION`` (-1) below the first threshold."""
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    mag = np.sqrt(vx * vx + vy * vy)
    theta = np.mod(np.arctan2(vy, vx), 2 * np.pi)
    sector = 2 * np.pi / q.n_directions
    d = np.minimum(np.floor(theta / sector).astype(np.int64), q.n_directions - 1)
    level = np.searchsorted(np.asarray(q.level_thresholds, dtype=np.float64), mag, side="right") - 1
    return np.where(level < 0, NULL_MOTION, level * q.n_directions + d)


def quantize_vector(vx: float, vy: float, q: QuantizerConfig = QuantizerConfig()) -> int | None:
    """Bin index in [0, 31] for one flow vector, or ``None`` for null motion."""
    b = int(quantize_flow(vx, vy, q))
    return None if b == NULL_MOTION else b


def _stripe_bounds(height: int):
    edges = np.linspace(0, height, N_STRIPES + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def stripe_histograms(flow: FlowField, q: QuantizerConfig = QuantizerConfig()) -> np.ndarray:
    """128 values: per stripe, the fraction of stripe pixels falling in each motion bin."""
    bins = quantize_flow(flow.vx, flow.vy, q)
    out = np.zeros((N_STRIPES, q.n_bins))
    for s, (r0, r1) in enumerate(_stripe_bounds(bins.shape[0])):
        stripe = bins[r0:r1].ravel()
        counts = np.bincount(stripe[stripe != NULL_MOTION], minlength=q.n_bins)
        out[s] = counts / stripe.size
    return out.ravel()


def stationary_counts(fg: np.ndarray, flow: FlowField, q: QuantizerConfig = QuantizerConfig()) -> np.ndarray:
    """Per stripe, fraction of pixels that are foreground yet have null motion."""
    fg = np.asarray(fg)
    if fg.shape != flow.shape:
        raise MalformedInputError(f"foreground mask {fg.shape} and flow {flow.shape} differ in shape")
    still = fg.astype(bool) & (np.sqrt(flow.vx**2 + flow.vy**2) < q.null_motion_epsilon)
    return np.array([still[r0:r1].sum() / still[r0:r1].size for r0, r1 in _stripe_bounds(fg.shape[0])])


def motion_feature_vector(flow: FlowField, fg: np.ndarray, q: QuantizerConfig = QuantizerConfig()) -> np.ndarray:
    """132 entries, stripe-major: ``[stripe0 bins 0..31, stripe0 count, stripe1 bins, ...]``."""
    hist = stripe_histograms(flow, q).reshape(N_STRIPES, q.n_bins)
    counts = stationary_counts(fg, flow, q)
    return np.concatenate([hist, counts[:, None]], axis=1).ravel()


def _gray(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise MalformedInputError(f"expected a 2-D frame, got shape {frame.shape}")
    return frame.astype(np.float64) / 255.0


def build_appearance(frame) -> np.ndarray:
    return _gray(frame)[..., None]


def build_appearance_flow(frame, flow: FlowField) -> np.ndarray:
    gray = _gray(frame)
    if flow.shape != gray.shape:
        raise MalformedInputError(f"flow {flow.shape} and frame {gray.shape} differ in shape")
    vx = np.clip(flow.vx, -FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP
    vy = np.clip(flow.vy, -FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP
    return np.stack([gray, vx, vy], axis=-1)


# --- online encoders -------------------------------------------------------
# Each encoder turns raw frames into representations one frame at a time, so
# the same code path serves cached training data and live streams.


@dataclass
class FrameEncoder:
    lane_mask: np.ndarray | None = None

    kind = "base"

    def reset(self) -> None:
        pass

    def _masked(self, frame) -> np.ndarray:
        frame = np.asarray(frame)
        return frame if self.lane_mask is None else apply_mask(frame, self.lane_mask)

    def step(self, frame) -> np.ndarray:
        raise NotImplementedError

    def encode(self, frames) -> np.ndarray:
        self.reset()
        return np.stack([self.step(f) for f in frames])


@dataclass
class MotionEncoder(FrameEncoder):
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    flow_params: FlowParams = field(default_factory=FlowParams)
    bg_params: BackgroundParams = field(default_factory=BackgroundParams)

    kind = "hist"

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self._prev = None
        self._bg = None

    def step(self, frame) -> np.ndarray:
        frame = self._masked(frame)
        if self._prev is None:
            self._bg = bg_init(frame, self.bg_params)
            flow = FlowField.zeros(frame.shape)
        else:
            flow = estimate_flow(self._prev, frame, self.flow_params)
        fg = bg_update(self._bg, frame)
        self._prev = frame
        return motion_feature_vector(flow, fg, self.quantizer).astype(np.float32)


@dataclass
class AppearanceEncoder(FrameEncoder):
    kind = "conv"

    def step(self, frame) -> np.ndarray:
        return build_appearance(self._masked(frame)).astype(np.float32)


@dataclass
class AppearanceFlowEncoder(FrameEncoder):
    flow_params: FlowParams = field(default_factory=FlowParams)

    kind = "convFlow"

    def __post_init__(self):
        self.reset()

    def reset(self) -> None:
        self._prev = None

    def step(self, frame) -> np.ndarray:
        frame = self._masked(frame)
        if self._prev is None:
            flow = FlowField.zeros(frame.shape)
        else:
            flow = estimate_flow(self._prev, frame, self.flow_params)
        self._prev = frame
        return build_appearance_flow(frame, flow).astype(np.float32)


@dataclass
class ExternalEncoder(FrameEncoder):
    """Wraps a user-supplied ``frame -> vector`` feature provider of fixed length."""

    provider: Callable[[np.ndarray], np.ndarray] | None = None
    length: int = 0

    kind = "external"

    def step(self, frame) -> np.ndarray:
        if self.provider is None:
            raise ValueError("external encoder needs a feature provider")
        vec = np.asarray(self.provider(self._masked(frame)), dtype=np.float32).ravel()
        if vec.shape != (self.length,):
            raise MalformedInputError(f"feature provider returned {vec.shape}, expected ({self.length},)")
        return vec


def make_encoder(variant: str, lane_mask=None, **kwargs) -> FrameEncoder:
    if variant == "hist":
        return MotionEncoder(lane_mask, **kwargs)
    if variant == "conv":
        return AppearanceEncoder(lane_mask)
    if variant == "convFlow":
        return AppearanceFlowEncoder(lane_mask, **kwargs)
    if variant == "external":
        return ExternalEncoder(lane_mask, **kwargs)
    raise ValueError(f"unknown variant {variant!r}")

"""Clips, labels, lane masks and the TEVC binary clip container.

Frames are stored as ``(height, width)`` uint8 arrays, i.e. a 160x120 frame
has shape ``(120, 160)``. Labels are ``(n_frames, 4)`` boolean arrays whose
columns follow :class:`EventClass` order.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FRAME_WIDTH = 160
FRAME_HEIGHT = 120
CLIP_LENGTH = 125
CLIP_FPS = 2
SOURCE_FPS = 25

MAGIC = b"TEVC"
VERSION = 1
_HEADER = struct.Struct("<4sHHHHBI")


class MalformedInputError(ValueError):
    """Input array has the wrong shape, channel count or range."""


class ClipFormatError(ValueError):
    """A TEVC container could not be parsed."""

    def __init__(self, field_name: str, offset: int, message: str):
        super().__init__(f"{message} (field '{field_name}' at byte offset {offset})")
        self.field = field_name
        self.offset = offset


class EventClass(enum.IntEnum):
    STATIONARY = 1
    DEPARTING = 2
    WRONG_WAY = 3
    CAR_CRASH = 4

    @property
    def index(self) -> int:
        return int(self) - 1

    @property
    def slug(self) -> str:
        return self.name.lower()


EVENT_CLASSES = tuple(EventClass)
N_EVENTS = len(EVENT_CLASSES)


@dataclass(frozen=True, eq=False)
class Clip:
    frames: np.ndarray  # (T, H, W) uint8
    labels: np.ndarray  # (T, 4) bool
    clip_id: str
    frame_rate: int = CLIP_FPS
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames)
        labels = np.asarray(self.labels, dtype=bool)
        if frames.ndim != 3 or frames.dtype != np.uint8:
            raise MalformedInputError(f"frames must be a (T, H, W) uint8 array, got {frames.shape} {frames.dtype}")
        if labels.shape != (frames.shape[0], N_EVENTS):
            raise MalformedInputError(f"labels shape {labels.shape} does not match {frames.shape[0]} frames")
        frames.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Clip):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.frame_rate == other.frame_rate
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion ``0.299R + 0.587G + 0.114B`` rounded to the nearest integer."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise MalformedInputError(f"expected an (H, W, 3) frame, got shape {rgb.shape}")
    if rgb.size and (rgb.min() < 0 or rgb.max() > 255):
        raise MalformedInputError("channel values must lie in [0, 255]")
    luma = rgb.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    return np.clip(np.rint(luma), 0, 255).astype(np.uint8)


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` at fractional (row, col) positions with edge clamping."""
    h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2) if h > 1 else np.zeros_like(ys, dtype=np.intp)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2) if w > 1 else np.zeros_like(xs, dtype=np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    img = img.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize_crop(frame: np.ndarray, width: int = FRAME_WIDTH, height: int = FRAME_HEIGHT) -> np.ndarray:
    """Center-crop to the target aspect ratio, then bilinear-resize.

    Pixel centers are aligned (half-pixel convention), so a same-size input
    is returned unchanged.
    """
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise MalformedInputError(f"expected a 2-D grayscale frame, got shape {frame.shape}")
    src_h, src_w = frame.shape
    if src_h < 2 or src_w < 2:
        raise MalformedInputError(f"degenerate source frame {src_w}x{src_h}")

    # crop the larger relative dimension; integer extents, centered
    if src_w * height > src_h * width:
        crop_h, crop_w = src_h, int(round(src_h * width / height))
    else:
        crop_h, crop_w = int(round(src_w * height / width)), src_w
    top = (src_h - crop_h) // 2
    left = (src_w - crop_w) // 2
    crop = frame[top:top + crop_h, left:left + crop_w]
    if crop.shape == (height, width):
        return crop.copy()

    ys = (np.arange(height) + 0.5) * (crop_h / height) - 0.5
    xs = (np.arange(width) + 0.5) * (crop_w / width) - 0.5
    out = bilinear_sample(crop, ys[:, None], xs[None, :])
    if np.issubdtype(frame.dtype, np.integer):
        return np.clip(np.rint(out), 0, 255).astype(frame.dtype)
    return out.astype(frame.dtype)


def downsample_indices(n: int, src_fps: float = SOURCE_FPS, dst_fps: float = CLIP_FPS) -> list[int]:
    # Python's round() is half-to-even, so 12.5 -> 12; floor(x + 0.5) keeps round-half-up
    step = src_fps / dst_fps
    out = []
    k = 0
    while True:
        idx = int(np.floor(k * step + 0.5))
        if idx >= n:
            return out
        out.append(idx)
        k += 1


def temporal_downsample(frames, src_fps: float = SOURCE_FPS, dst_fps: float = CLIP_FPS):
    """Keep source indices ``round(k * 12.5)`` (25 -> 2 fps) while in range."""
    return [frames[i] for i in downsample_indices(len(frames), src_fps, dst_fps)]


def apply_mask(frame: np.ndarray, mask: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    mask = np.asarray(mask)
    if frame.shape[:2] != mask.shape:
        raise MalformedInputError(f"mask shape {mask.shape} does not match frame shape {frame.shape}")
    keep = mask.astype(bool)
    if frame.ndim == 3:
        keep = keep[..., None]
    return np.where(keep, frame, 0).astype(frame.dtype)


def check_lane_mask(mask: np.ndarray, shape=(FRAME_HEIGHT, FRAME_WIDTH)) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise MalformedInputError(f"lane mask shape {mask.shape} != {tuple(shape)}")
    if not mask.any():
        raise MalformedInputError("lane mask has no monitored pixels")
    return mask.astype(np.uint8)


def labels_to_bitmask(labels: np.ndarray) -> np.ndarray:
    weights = 1 << np.arange(N_EVENTS, dtype=np.uint8)
    return (np.asarray(labels, dtype=np.uint8) * weights).sum(axis=1).astype(np.uint8)


def bitmask_to_labels(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.uint8)
    return ((bits[:, None] >> np.arange(N_EVENTS, dtype=np.uint8)) & 1).astype(bool)


def encode_clip(clip: Clip) -> bytes:
    t, h, w = clip.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, w, h, clip.frame_rate, 1, t)
    body = np.empty((t, 1 + h * w), dtype=np.uint8)
    body[:, 0] = labels_to_bitmask(clip.labels)
    body[:, 1:] = clip.frames.reshape(t, h * w)
    return header + body.tobytes()


def decode_clip(data: bytes, clip_id: str = "", provenance: dict | None = None) -> Clip:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ClipFormatError("magic", 0, "bad magic")
    if len(data) < _HEADER.size:
        raise ClipFormatError("header", len(data), "truncated header")
    _, version, w, h, fps, channels, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise ClipFormatError("version", 4, f"version mismatch: {version} != {VERSION}")
    if channels != 1:
        raise ClipFormatError("channels", 12, f"unsupported channel count {channels}")
    if w < 1 or h < 1:
        raise ClipFormatError("width" if w < 1 else "height", 6 if w < 1 else 8, "zero frame extent")

    stride = 1 + w * h
    payload = memoryview(data)[_HEADER.size:]
    present = len(payload) // stride
    if present < count:
        offset = _HEADER.size + present * stride
        raise ClipFormatError(
            "frame_count", offset, f"truncated payload: header declares {count} frames, found {present}"
        )
    if len(payload) > count * stride:
        raise ClipFormatError("payload", _HEADER.size + count * stride, "trailing bytes after last frame")

    body = np.frombuffer(payload, dtype=np.uint8).reshape(count, stride)
    bits = body[:, 0]
    bad = np.flatnonzero(bits >> N_EVENTS)
    if bad.size:
        offset = _HEADER.size + int(bad[0]) * stride
        raise ClipFormatError("label_bitmask", offset, f"label bitmask {bits[bad[0]]:#04x} has bits >= {N_EVENTS} set")
    frames = body[:, 1:].reshape(count, h, w).copy()
    return Clip(frames, bitmask_to_labels(bits), clip_id, fps, dict(provenance or {}))


def save_clip(clip: Clip, path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def load_clip(path, clip_id: str | None = None) -> Clip:
    path = Path(path)
    return decode_clip(path.read_bytes(), clip_id if clip_id is not None else path.stem)


def write_sidecar(path, clip_id: str, seed, event_onset_frame, scenario_kind: str) -> None:
    meta = {
        "clip_id": clip_id,
        "seed": seed,
        "event_onset_frame": event_onset_frame,
        "scenario_kind": scenario_kind,
    }
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) portable graymap."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def write_pbm(path, mask: np.ndarray) -> None:
    """Binary (P4) portable bitmap; 1 = black = foreground."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    Path(path).write_bytes(f"P4\n{w} {h}\n".encode("ascii") + packed.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedInputError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise MalformedInputError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise MalformedInputError(f"{path}: only 8-bit PGM supported")
    pixels = data[pos + 1:]
    if len(pixels) < w * h:
        raise MalformedInputError(f"{path}: truncated PGM payload")
    return np.frombuffer(pixels[:w * h], dtype=np.uint8).reshape(h, w).copy()

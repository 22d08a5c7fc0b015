"""Dense two-frame optical flow via local quadratic polynomial expansion.

Each image neighbourhood is approximated by ``f(x) ~ x^T A x + b^T x + c``
(weighted least squares, Gaussian applicability). If the next frame is the
previous one shifted by ``d`` then ``b2 = b1 - 2 A d``; the displacement is
recovered from the coefficient mismatch, aggregated over a window, refined
iteratively with warping and propagated coarse-to-fine over a pyramid.

Coordinates: ``x`` is the column (horizontal, +right), ``y`` the row
(vertical, +down). ``vx, vy`` are in pixels per frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .clips import Clip, MalformedInputError


@dataclass(frozen=True)
class FlowParams:
    pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if self.pyramid_levels < 1 or self.iterations < 1:
            raise ValueError("pyramid_levels and iterations must be positive")
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must lie in (0, 1)")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be a positive odd integer")
        if self.poly_n < 3 or self.poly_n % 2 == 0:
            raise ValueError("poly_n must be an odd integer >= 3")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be positive")


@dataclass(frozen=True)
class FlowField:
    vx: np.ndarray
    vy: np.ndarray

    @property
    def shape(self):
        return self.vx.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape))

    def to_bytes(self) -> bytes:
        """Two little-endian f32 planes (vx then vy), row-major."""
        return self.vx.astype("<f4").tobytes() + self.vy.astype("<f4").tobytes()


# basis order: 1, x, y, x^2, y^2, xy  (as (x power, y power))
_BASIS = ((0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1))
# keep a pinned regulariser equivalent to 1e-3 on 8-bit intensities
DET_EPS = 1e-3 / 255.0**4


def _applicability(poly_n: int, poly_sigma: float):
    r = poly_n // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * poly_sigma**2))
    return x, g / g.sum()


def _gram_inverse(poly_n: int, poly_sigma: float) -> np.ndarray:
    x, g = _applicability(poly_n, poly_sigma)
    yy, xx = np.meshgrid(x, x, indexing="ij")
    w = np.outer(g, g)
    phi = np.stack([xx**a * yy**b for a, b in _BASIS])
    gram = np.einsum("kij,lij,ij->kl", phi, phi, w)
    return np.linalg.inv(gram)


def polynomial_expansion(frame: np.ndarray, poly_n: int = 5, poly_sigma: float = 1.1) -> np.ndarray:
    """Per-pixel quadratic coefficients ``(c, bx, by, a_xx, a_yy, a_xy)``.

    Returns an ``(H, W, 6)`` array; the quadratic form matrix is
    ``A = [[a_xx, a_xy / 2], [a_xy / 2, a_yy]]``. Frames are expected in
    [0, 1]. Borders use edge-clamped sampling.
    """
    f = np.asarray(frame, dtype=np.float64)
    x, g = _applicability(poly_n, poly_sigma)
    kernels = {p: g * x**p for p in range(3)}
    # separable moments: correlate columns (axis 1) with x-kernel, rows (axis 0) with y-kernel
    by_x = {p: ndimage.correlate1d(f, kernels[p], axis=1, mode="nearest") for p in range(3)}
    moments = np.stack(
        [ndimage.correlate1d(by_x[a], kernels[b], axis=0, mode="nearest") for a, b in _BASIS], axis=-1
    )
    return moments @ _gram_inverse(poly_n, poly_sigma).T


def _pyramid_image(img: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return img
    sigma = (1.0 / scale - 1.0) * 0.5
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest", truncate=2.5)
    h, w = img.shape
    return _resize(smooth, (max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)))


def _resize(img: np.ndarray, shape) -> np.ndarray:
    h, w = img.shape[:2]
    nh, nw = shape
    ys = np.clip((np.arange(nh) + 0.5) * (h / nh) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(nw) + 0.5) * (w / nw) - 0.5, 0, w - 1)
    return _bilinear(img, ys[:, None] + 0 * xs[None, :], xs[None, :] + 0 * ys[:, None])


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Edge-clamped bilinear lookup; ``img`` may carry trailing channels."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _update_matrices(r1: np.ndarray, r2: np.ndarray, vx: np.ndarray, vy: np.ndarray) -> np.ndarray:
    h, w = vx.shape
    rows, cols = np.mgrid[0:h, 0:w]
    warped = _bilinear(r2, rows + vy, cols + vx)

    a11 = 0.5 * (r1[..., 3] + warped[..., 3])
    a22 = 0.5 * (r1[..., 4] + warped[..., 4])
    a12 = 0.25 * (r1[..., 5] + warped[..., 5])
    db1 = -0.5 * (warped[..., 1] - r1[..., 1]) + a11 * vx + a12 * vy
    db2 = -0.5 * (warped[..., 2] - r1[..., 2]) + a12 * vx + a22 * vy

    out = np.empty((h, w, 5))
    out[..., 0] = a11 * a11 + a12 * a12
    out[..., 1] = a12 * (a11 + a22)
    out[..., 2] = a12 * a12 + a22 * a22
    out[..., 3] = a11 * db1 + a12 * db2
    out[..., 4] = a12 * db1 + a22 * db2
    return out


def _solve(mats: np.ndarray, window: int):
    m = ndimage.uniform_filter(mats, size=(window, window, 1), mode="nearest")
    g11, g12, g22, h1, h2 = (m[..., k] for k in range(5))
    idet = 1.0 / (g11 * g22 - g12 * g12 + DET_EPS)
    return (g22 * h1 - g12 * h2) * idet, (g11 * h2 - g12 * h1) * idet


def _check_frame(frame) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim != 2:
        raise MalformedInputError(f"expected a 2-D frame, got shape {frame.shape}")
    if np.issubdtype(frame.dtype, np.integer):
        return frame.astype(np.float64) / 255.0
    return frame.astype(np.float64)


def estimate_flow(prev: np.ndarray, nxt: np.ndarray, params: FlowParams = FlowParams()) -> FlowField:
    """Displacement field mapping ``prev`` onto ``nxt``.

    Integer (uint8) frames are normalised to [0, 1]; float frames are used
    as given.
    """
    a = _check_frame(prev)
    b = _check_frame(nxt)
    if a.shape != b.shape:
        raise MalformedInputError(f"frame shapes differ: {a.shape} vs {b.shape}")

    vx = vy = None
    for level in range(params.pyramid_levels - 1, -1, -1):
        scale = params.pyramid_scale**level
        img_a = _pyramid_image(a, scale)
        img_b = _pyramid_image(b, scale)
        shape = img_a.shape
        if vx is None:
            vx = np.zeros(shape)
            vy = np.zeros(shape)
        else:
            vx = _resize(vx, shape) / params.pyramid_scale
            vy = _resize(vy, shape) / params.pyramid_scale
        r1 = polynomial_expansion(img_a, params.poly_n, params.poly_sigma)
        r2 = polynomial_expansion(img_b, params.poly_n, params.poly_sigma)
        for _ in range(params.iterations):
            vx, vy = _solve(_update_matrices(r1, r2, vx, vy), params.window_size)
    return FlowField(vx, vy)


def flow_for_clip(clip: Clip | np.ndarray, params: FlowParams = FlowParams()) -> list[FlowField]:
    """``out[0]`` is a zero field; ``out[i]`` is the flow from frame i-1 to frame i."""
    frames = clip.frames if isinstance(clip, Clip) else np.asarray(clip)
    out = [FlowField.zeros(frames.shape[1:])]
    for i in range(1, len(frames)):
        out.append(estimate_flow(frames[i - 1], frames[i], params))
    return out

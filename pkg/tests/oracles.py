"""Independent reference computations shared by the unit and acceptance tests."""
import math

import numpy as np
from scipy import ndimage


def textured_frame(seed, shape=(120, 160), sigma=1.5):
    """Smooth random texture in [0, 255] (float)."""
    rng = np.random.default_rng(seed)
    img = ndimage.gaussian_filter(rng.normal(0, 1, shape), sigma, mode="wrap")
    img = (img - img.min()) / (img.max() - img.min())
    return 20 + 215 * img


def shifted(img, dx, dy):
    """``out[y, x] = img[y - dy, x - dx]`` (wrapping), i.e. content moves by (dx, dy)."""
    return np.roll(img, (dy, dx), axis=(0, 1))


def interior_epe(flow, dx, dy, border=16):
    ex = flow.vx[border:-border, border:-border] - dx
    ey = flow.vy[border:-border, border:-border] - dy
    return float(np.mean(np.hypot(ex, ey)))


def brute_force_bin(vx, vy, thresholds=(0.5, 2.0, 5.0, 10.0)):
    """Scalar quantizer written from the definition, one vector at a time."""
    m = math.sqrt(vx * vx + vy * vy)
    if m < thresholds[0]:
        return None
    theta = math.atan2(vy, vx) % (2 * math.pi)
    d = min(int(theta // (math.pi / 4)), 7)
    level = max(i for i, t in enumerate(thresholds) if m >= t)
    return level * 8 + d


def brute_force_histograms(vx, vy, thresholds=(0.5, 2.0, 5.0, 10.0)):
    h, w = vx.shape
    rows = h // 4
    out = np.zeros(128)
    for y in range(h):
        stripe = min(y // rows, 3)
        for x in range(w):
            b = brute_force_bin(float(vx[y, x]), float(vy[y, x]), thresholds)
            if b is not None:
                out[stripe * 32 + b] += 1
    return out / (rows * w)


def f1_by_hand(pred, truth):
    tp = sum(1 for p, t in zip(pred, truth) if p and t)
    fp = sum(1 for p, t in zip(pred, truth) if p and not t)
    fn = sum(1 for p, t in zip(pred, truth) if t and not p)
    return 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def vectorised_tally(vx, vy, thresholds=(0.5, 2.0, 5.0, 10.0)):
    """Same definition as :func:`brute_force_histograms`, written with masks and ``np.add.at``."""
    m = np.sqrt(vx * vx + vy * vy)
    theta = np.arctan2(vy, vx) % (2 * np.pi)
    d = np.minimum((theta // (np.pi / 4)).astype(int), 7)
    level = np.full(vx.shape, -1)
    for i, t in enumerate(thresholds):
        level[m >= t] = i
    rows = vx.shape[0] // 4
    stripe = np.minimum(np.arange(vx.shape[0]) // rows, 3)[:, None] + np.zeros(vx.shape, int)
    keep = level >= 0
    out = np.zeros((4, 32))
    np.add.at(out, (stripe[keep], (level * 8 + d)[keep]), 1)
    return (out / (rows * vx.shape[1])).ravel()


def random_flow(rng, shape=(120, 160)):
    """Flow field mixing smooth values with vectors sitting exactly on bin edges."""
    kind = rng.integers(4)
    scale = [1.0, 4.0, 12.0, 0.3][kind]
    vx = rng.normal(0, scale, shape)
    vy = rng.normal(0, scale, shape)
    edge = rng.random(shape) < 0.2
    mags = rng.choice([0.0, 0.5, 2.0, 5.0, 10.0], size=shape)
    angles = rng.integers(0, 8, size=shape) * (np.pi / 4)
    vx = np.where(edge, mags * np.round(np.cos(angles), 12), vx)
    vy = np.where(edge, mags * np.round(np.sin(angles), 12), vy)
    return vx, vy


def rotate45(vx, vy):
    c = s = math.sqrt(0.5)
    return c * vx - s * vy, s * vx + c * vy


def polar_flow(rng, shape=(120, 160), margin=0.02):
    """Vectors whose angles and magnitudes keep a margin from every bin edge."""
    sector = rng.integers(0, 8, shape) + rng.uniform(margin, 1 - margin, shape)
    edges = np.array([0.0, 0.5, 2.0, 5.0, 10.0, 20.0])
    level = rng.integers(0, 5, shape)
    lo, hi = edges[level], edges[level + 1]
    mag = lo + (hi - lo) * rng.uniform(margin, 1 - margin, shape)
    theta = sector * (np.pi / 4)
    return mag * np.cos(theta), mag * np.sin(theta)


def permute_directions(hist, shift=1):
    """Apply ``d -> (d + shift) mod 8`` inside every (stripe, level) group."""
    h = hist.reshape(4, 4, 8)
    return np.roll(h, shift, axis=2).ravel()

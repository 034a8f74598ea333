"""Synthetic test images: piecewise-constant scenes and a simple phantom."""

from __future__ import annotations

import numpy as np

__all__ = ["piecewise_constant", "piecewise_dataset", "step_image", "phantom", "radial_lines_mask", "row_mask"]


def piecewise_constant(size: int = 64, n_shapes: int = 6, rng=None, channels: int = 1) -> np.ndarray:
    """Random rectangles and discs on a constant background, values in ``[0, 1]``."""
    rng = np.random.default_rng(rng)
    h = w = size
    img = np.full((channels, h, w), rng.uniform(0.1, 0.9, size=(channels, 1, 1)))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(n_shapes):
        val = rng.uniform(0.0, 1.0, size=(channels, 1))
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
            y1 = rng.integers(y0 + 4, min(h, y0 + h // 2) + 1)
            x1 = rng.integers(x0 + 4, min(w, x0 + w // 2) + 1)
            sel = (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(min(3.0, size / 8), size / 4)
            sel = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, sel] = val
    return img


def piecewise_dataset(n: int, size: int = 64, seed: int = 0, channels: int = 1) -> list:
    rng = np.random.default_rng(seed)
    return [piecewise_constant(size, int(rng.integers(4, 10)), rng, channels) for _ in range(n)]


def step_image(size: int = 32, low: float = 0.2, high: float = 0.8, channels: int = 1) -> np.ndarray:
    """Vertical step edge in the middle of the image."""
    img = np.full((channels, size, size), low)
    img[..., size // 2:] = high
    return img


def phantom(size: int = 64) -> np.ndarray:
    """Nested ellipses, a Shepp-Logan-like test object on ``[0, 1]``."""
    yy, xx = np.mgrid[-1:1:size * 1j, -1:1:size * 1j]
    img = np.zeros((size, size))
    ellipses = [
        (0.0, 0.0, 0.69, 0.92, 0.0, 0.8),
        (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.5),
        (0.22, 0.0, 0.11, 0.31, -18.0, -0.15),
        (-0.22, 0.0, 0.16, 0.41, 18.0, -0.15),
        (0.0, 0.35, 0.21, 0.25, 0.0, 0.3),
        (0.0, 0.1, 0.046, 0.046, 0.0, 0.25),
        (-0.08, -0.605, 0.046, 0.023, 0.0, 0.3),
        (0.06, -0.605, 0.023, 0.046, 0.0, 0.3),
    ]
    for cx, cy, a, b, ang, val in ellipses:
        t = np.deg2rad(ang)
        xr = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        yr = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += val
    return np.clip(img, 0.0, 1.0)[None]


def row_mask(size: int, every: int = 4, center: int = 4) -> np.ndarray:
    """Cartesian undersampling: every ``every``-th frequency row plus ``center`` low-frequency rows."""
    m = np.zeros((size, size), dtype=int)
    m[::every] = 1
    low = np.r_[0:center // 2 + 1, size - center // 2:size]
    m[low] = 1
    return m


def radial_lines_mask(size: int, n_lines: int = 12) -> np.ndarray:
    """Radial sampling pattern in unshifted DFT layout; always contains the DC term."""
    m = np.zeros((size, size), dtype=int)
    r = np.linspace(-size / 2, size / 2, 4 * size)
    for t in np.linspace(0, np.pi, n_lines, endpoint=False):
        iy = np.round(r * np.sin(t)).astype(int) % size
        ix = np.round(r * np.cos(t)).astype(int) % size
        m[iy, ix] = 1
    return m

"""Small shared raster helpers: bilinear sampling and box filtering."""

from __future__ import annotations

import numpy as np


def bilinear_sample(grid: np.ndarray, xy: np.ndarray, fill: float = np.nan) -> np.ndarray:
    """Sample a 2-D grid at float (x, y) locations with bilinear weights.

    Out-of-bounds or non-finite locations return ``fill``. ``xy`` has shape
    (..., 2); the result matches its leading shape.
    """
    xy = np.asarray(xy, dtype=np.float64)
    lead = xy.shape[:-1]
    pts = xy.reshape(-1, 2)
    h, w = grid.shape[:2]
    out = np.full(len(pts), fill, dtype=np.float64)

    ok = np.all(np.isfinite(pts), axis=1)
    if np.any(ok):
        x = pts[ok, 0]
        y = pts[ok, 1]
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
        ok_idx = np.flatnonzero(ok)[inside]
        x, y = x[inside], y[inside]
        x0 = np.clip(np.floor(x).astype(int), 0, w - 2) if w > 1 else np.zeros(len(x), int)
        y0 = np.clip(np.floor(y).astype(int), 0, h - 2) if h > 1 else np.zeros(len(y), int)
        fx = x - x0
        fy = y - y0
        g = grid.astype(np.float64, copy=False)
        if w == 1:
            fx = np.zeros_like(fx)
            x1 = x0
        else:
            x1 = x0 + 1
        if h == 1:
            fy = np.zeros_like(fy)
            y1 = y0
        else:
            y1 = y0 + 1
        val = (
            g[y0, x0] * (1 - fx) * (1 - fy)
            + g[y0, x1] * fx * (1 - fy)
            + g[y1, x0] * (1 - fx) * fy
            + g[y1, x1] * fx * fy
        )
        out[ok_idx] = val
    return out.reshape(lead)


def box_blur3(grid: np.ndarray) -> np.ndarray:
    """3x3 averaging filter with replicated borders."""
    g = np.asarray(grid, dtype=np.float64)
    p = np.pad(g, 1, mode="edge")
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
        + p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    ) / 9.0


def window_max_mean(grid: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Max and mean over every fully-contained size x size window.

    Returns arrays of shape (H - size + 1, W - size + 1).
    """
    from scipy.ndimage import maximum_filter, uniform_filter

    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    if size > min(h, w):
        raise ValueError("window larger than grid")
    mx = maximum_filter(g, size=size, mode="nearest")
    mn = uniform_filter(g, size=size, mode="nearest")
    r0 = size // 2
    rows = slice(r0, r0 + h - size + 1)
    cols = slice(r0, r0 + w - size + 1)
    return mx[rows, cols], mn[rows, cols]

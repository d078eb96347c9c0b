"""Bilinear sampling helpers.

Coordinates are ``(x, y)`` = ``(column, row)`` with integer values at pixel
centers, so ``(0, 0)`` is the center of the top-left pixel.
"""

from __future__ import annotations

import numpy as np


def bilinear_taps(shape: tuple[int, int], coords: np.ndarray):
    """Flat indices and weights of the four bilinear taps for each coordinate.

    Taps outside the grid are clamped to the nearest edge cell, which is the
    same as edge-clamp sampling.

    Returns:
        idx: int64 array ``(..., 4)`` of flat indices into an ``(H, W)`` grid.
        w: float array ``(..., 4)`` of tap weights summing to one.
    """
    h, w = shape
    x = coords[..., 0]
    y = coords[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xa = np.clip(x0, 0, w - 1)
    xb = np.clip(x0 + 1, 0, w - 1)
    ya = np.clip(y0, 0, h - 1)
    yb = np.clip(y0 + 1, 0, h - 1)
    idx = np.stack([ya * w + xa, ya * w + xb, yb * w + xa, yb * w + xb], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, wts


def bilinear_sample(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``image`` (H, W[, C]) at real-valued ``coords`` (..., 2) with edge clamping."""
    h, w = image.shape[:2]
    idx, wts = bilinear_taps((h, w), coords)
    flat = image.reshape(h * w, -1)
    out = np.einsum("...k,...kc->...c", wts, flat[idx])
    if image.ndim == 2:
        return out[..., 0]
    return out


def upsample_bilinear(field: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resample a cell-centered grid so that output cell ``i`` sits at input ``(i + 0.5) / 2 - 0.5``.

    The output may be one cell shorter than exactly double along an axis; the
    cell-center correspondence is unchanged.
    """
    hn, wn = out_shape
    xs = (np.arange(wn) + 0.5) / 2.0 - 0.5
    ys = (np.arange(hn) + 0.5) / 2.0 - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return bilinear_sample(field, np.stack([gx, gy], axis=-1))

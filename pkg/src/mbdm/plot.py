"""Scatter plots rasterized without anti-aliasing.

Each sample lights exactly one pixel, so colour counts in the image can be
checked against row counts.
"""

from __future__ import annotations

import numpy as np

BACKGROUND = (255, 255, 255)
MASK = (214, 222, 230)
VALID = (31, 119, 180)
INVALID = (140, 81, 25)   # brown


def pixel_index(xy: np.ndarray, width: int, height: int, xlim, ylim):
    """Row/column of each point and a mask of points inside the frame."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    col = np.floor((xy[:, 0] - xlim[0]) / (xlim[1] - xlim[0]) * width)
    row = np.floor((ylim[1] - xy[:, 1]) / (ylim[1] - ylim[0]) * height)
    ok = (col >= 0) & (col < width) & (row >= 0) & (row < height) & np.isfinite(xy).all(axis=1)
    return row.astype(np.int64, copy=False), col.astype(np.int64, copy=False), ok


def pixel_centers(width: int, height: int, xlim, ylim) -> np.ndarray:
    """Centres of all pixels in row-major order, as ``(height * width, 2)``."""
    xs = xlim[0] + (np.arange(width) + 0.5) * (xlim[1] - xlim[0]) / width
    ys = ylim[1] - (np.arange(height) + 0.5) * (ylim[1] - ylim[0]) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def render_scatter(xy, valid, width: int, height: int, xlim, ylim, mask=None) -> tuple[np.ndarray, int]:
    """Draw valid points, then invalid points on top, over an optional membership mask.

    ``mask`` is a boolean ``(height, width)`` array.  Returns the image and
    the number of points that fell outside the frame.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    if not (xlim[0] < xlim[1] and ylim[0] < ylim[1]):
        raise ValueError("plot limits must be increasing")
    img = np.empty((height, width, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    if mask is not None:
        img[np.asarray(mask, dtype=bool)] = MASK
    valid = np.asarray(valid, dtype=bool)
    row, col, ok = pixel_index(xy, width, height, xlim, ylim)
    for sel, colour in ((valid, VALID), (~valid, INVALID)):
        keep = sel & ok
        img[row[keep], col[keep]] = colour
    return img, int((~ok).sum())

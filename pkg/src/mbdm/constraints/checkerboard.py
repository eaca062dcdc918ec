from __future__ import annotations

import math

import numpy as np

from mbdm.constraints.base import DistanceField

# 5x5 neighbourhood, lexicographic so argmin ties resolve to the lowest cell index
_OFFSETS = np.array([(di, dj) for di in range(-2, 3) for dj in range(-2, 3)], dtype=np.int64)


class Checkerboard(DistanceField):
    """Squared Euclidean distance to the valid cells of a bounded checkerboard.

    The board spans ``[lo, hi]^2`` with square cells of side ``cell``.  Cell
    ``(i, j)`` covers ``[i*cell, (i+1)*cell] x [j*cell, (j+1)*cell]`` and is
    valid when ``(i + j) % 2 == parity``.  Cells are closed, so shared edges
    and corners belong to the constraint set.
    """

    dim = 2
    name = "checkerboard"

    def __init__(self, cell: float = 1.0, lo: float = -2.0, hi: float = 2.0, parity: int = 0):
        self.cell = float(cell)
        self.lo, self.hi = float(lo), float(hi)
        self.parity = int(parity) % 2
        self.i_lo = int(math.floor(self.lo / self.cell + 1e-9))
        self.i_hi = int(math.ceil(self.hi / self.cell - 1e-9))  # exclusive

    def valid_cells(self) -> np.ndarray:
        idx = np.arange(self.i_lo, self.i_hi)
        ii, jj = np.meshgrid(idx, idx, indexing="ij")
        keep = (ii + jj) % 2 == self.parity
        return np.stack([ii[keep], jj[keep]], axis=1)

    def _candidates(self, x):
        base = np.clip(np.floor(x / self.cell).astype(np.int64), self.i_lo, self.i_hi - 1)
        cells = base[:, None, :] + _OFFSETS[None, :, :]  # (B, 25, 2)
        inside = ((cells >= self.i_lo) & (cells < self.i_hi)).all(axis=2)
        usable = inside & ((cells.sum(axis=2) % 2) == self.parity)
        lo = cells * self.cell
        proj = np.clip(x[:, None, :], lo, lo + self.cell)
        d2 = ((x[:, None, :] - proj) ** 2).sum(axis=2)
        d2 = np.where(usable, d2, np.inf)
        return proj, d2, usable, lo

    def _value_and_grad(self, x, sigma):
        proj, d2, _, _ = self._candidates(x)
        k = np.argmin(d2, axis=1)
        rows = np.arange(len(x))
        p = proj[rows, k]
        return d2[rows, k], 2.0 * (x - p)

    def project(self, x):
        proj, d2, _, _ = self._candidates(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        k = np.argmin(d2, axis=1)
        out = proj[np.arange(len(proj)), k]
        return out[0] if np.ndim(x) == 1 else out

    def _member(self, x):
        _, _, usable, lo = self._candidates(x)
        hit = ((x[:, None, :] >= lo) & (x[:, None, :] <= lo + self.cell)).all(axis=2)
        return (hit & usable).any(axis=1)

    def tie_gap(self, x, sigma=0.0):
        """Distance to the nearest grid line or nearest-cell equidistance set."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, d2, _, _ = self._candidates(x)
        d = np.sqrt(np.sort(d2, axis=1)[:, :2])
        gap = d[:, 1] - d[:, 0]
        frac = x / self.cell - np.round(x / self.cell)
        grid = np.abs(frac).min(axis=1) * self.cell
        return np.minimum(gap, grid)


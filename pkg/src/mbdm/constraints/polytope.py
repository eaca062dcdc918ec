from __future__ import annotations

import numpy as np

from mbdm.constraints.base import DistanceField
from mbdm.errors import ConfigError

ORTHO_TOL = 1e-10


class OrthonormalPolytope(DistanceField):
    """Slab intersection ``{x : lower_i <= a_i.x <= upper_i}`` with orthonormal ``a_i``.

    Because the normals are orthonormal the projection decouples: clamp each
    coordinate ``a_i.x`` independently and move ``x`` along ``a_i``.  The
    distance is half the squared projection residual and its gradient treats
    the projection as a constant.
    """

    name = "polytope"

    def __init__(self, normals, lower, upper):
        a = np.atleast_2d(np.asarray(normals, dtype=np.float64))
        lo = np.broadcast_to(np.asarray(lower, dtype=np.float64), (a.shape[0],)).copy()
        hi = np.broadcast_to(np.asarray(upper, dtype=np.float64), (a.shape[0],)).copy()
        if a.shape[0] > a.shape[1]:
            raise ConfigError(f"{a.shape[0]} orthonormal vectors cannot live in dimension {a.shape[1]}")
        err = np.abs(a @ a.T - np.eye(a.shape[0])).max()
        if err > ORTHO_TOL:
            raise ConfigError(f"polytope normals are not orthonormal (max deviation {err:.2e})")
        if np.any(lo >= hi):
            raise ConfigError("polytope needs lower < upper for every constraint")
        self.normals, self.lower, self.upper = a, lo, hi
        self.dim = a.shape[1]

    @classmethod
    def random(cls, d: int, m: int, lower=-0.9, upper=0.9, rng=None) -> "OrthonormalPolytope":
        rng = np.random.default_rng(0) if rng is None else rng
        q, _ = np.linalg.qr(rng.standard_normal((d, m)))
        return cls(q.T, lower, upper)

    def _residual(self, x):
        z = x @ self.normals.T
        return (np.clip(z, self.lower, self.upper) - z) @ self.normals

    def _value_and_grad(self, x, sigma):
        r = self._residual(x)  # proj - x
        return 0.5 * (r * r).sum(axis=1), -r

    def project(self, x):
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = xb + self._residual(xb)
        return p[0] if np.ndim(x) == 1 else p

    def distance(self, x):
        """``(value, gradient, projection)`` in one call."""
        xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = self._residual(xb)
        out = 0.5 * (r * r).sum(axis=1), -r, xb + r
        if np.ndim(x) == 1:
            return float(out[0][0]), out[1][0], out[2][0]
        return out

    def _member(self, x):
        z = x @ self.normals.T
        return ((z >= self.lower) & (z <= self.upper)).all(axis=1)

    def hessian_trace(self, x, sigma=0.0):
        # each violated slab contributes a_i a_i^T, whose trace is 1
        z = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.normals.T
        return ((z < self.lower) | (z > self.upper)).sum(axis=1).astype(np.float64)

    def tie_gap(self, x, sigma=0.0):
        z = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.normals.T
        return np.minimum(np.abs(z - self.lower), np.abs(z - self.upper)).min(axis=1)


class BoxField(DistanceField):
    """Product of closed intervals ``[lo_j, hi_j]``; squared distance to the box."""

    name = "box"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ConfigError("box needs lo < hi in every dimension")
        self.dim = len(self.lo)

    def _value_and_grad(self, x, sigma):
        r = x - np.clip(x, self.lo, self.hi)
        return (r * r).sum(axis=1), 2.0 * r

    def _member(self, x):
        return ((x >= self.lo) & (x <= self.hi)).all(axis=1)

    def project(self, x):
        return np.clip(np.asarray(x, dtype=np.float64), self.lo, self.hi)

    def hessian_trace(self, x, sigma=0.0):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return 2.0 * ((x < self.lo) | (x > self.hi)).sum(axis=1).astype(np.float64)

    def tie_gap(self, x, sigma=0.0):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.minimum(np.abs(x - self.lo), np.abs(x - self.hi)).min(axis=1)

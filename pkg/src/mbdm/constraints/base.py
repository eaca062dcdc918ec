"""Distance-field interface, the variance-normalizing wrapper and gradient checks.

A distance field maps a batch of points ``x`` (shape ``(B, d)``) and a noise
level ``sigma`` to a non-negative value per point that is exactly zero on the
constraint set at ``sigma = 0``.  Noise level stands in for diffusion time
throughout the package, since the two are in one-to-one correspondence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_batch(x, dim: int | None = None) -> tuple[np.ndarray, bool]:
    """Return ``(x as (B, d) float array, was_single_point)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or (dim is not None and x.shape[1] != dim):
        raise ValueError(f"expected points of dimension {dim}, got array of shape {x.shape}")
    return x, single


class DistanceField:
    """Base class.  Subclasses implement ``_value_and_grad`` and ``_member``."""

    name = "field"
    dim: int

    def value_and_grad(self, x, sigma=0.0):
        xb, single = as_batch(x, self.dim)
        val, grad = self._value_and_grad(xb, sigma)
        if single:
            return float(val[0]), grad[0]
        return val, grad

    def value(self, x, sigma=0.0):
        return self.value_and_grad(x, sigma)[0]

    def grad(self, x, sigma=0.0):
        return self.value_and_grad(x, sigma)[1]

    def member(self, x):
        xb, single = as_batch(x, self.dim)
        m = self._member(xb)
        return bool(m[0]) if single else m

    def project(self, x):
        raise NotImplementedError(f"{type(self).__name__} has no projection")

    def hessian_trace(self, x, sigma=0.0):
        """Trace of the Hessian of the field, or ``None`` where unavailable."""
        return None

    def tie_gap(self, x, sigma=0.0):
        """Distance (in field units) from a set where the gradient is discontinuous.

        Fields without such sets return ``inf``.
        """
        xb, _ = as_batch(x, self.dim)
        return np.full(len(xb), np.inf)

    def _value_and_grad(self, x, sigma):  # pragma: no cover - abstract
        raise NotImplementedError

    def _member(self, x):  # pragma: no cover - abstract
        raise NotImplementedError


class NormalizedField(DistanceField):
    """Evaluate ``inner`` on ``x / sqrt(1 + sigma^2)``.

    Inputs at high noise are shrunk back to data scale before the geometric
    test; the gradient picks up the matching ``1 / sqrt(1 + sigma^2)`` factor.
    Membership is that of ``inner`` (the wrapper is the identity at sigma 0).
    """

    def __init__(self, inner: DistanceField):
        self.inner = inner
        self.dim = inner.dim
        self.name = f"normalized({inner.name})"

    @staticmethod
    def _scale(sigma, n):
        s = np.sqrt(1.0 + np.asarray(sigma, dtype=np.float64) ** 2)
        return np.broadcast_to(s, (n,)) if s.ndim else np.full(n, float(s))

    def _value_and_grad(self, x, sigma):
        s = self._scale(sigma, len(x))
        val, grad = self.inner.value_and_grad(x / s[:, None], sigma)
        return val, grad / s[:, None]

    def _member(self, x):
        return self.inner.member(x)

    def tie_gap(self, x, sigma=0.0):
        s = self._scale(sigma, len(as_batch(x, self.dim)[0]))
        return self.inner.tie_gap(as_batch(x, self.dim)[0] / s[:, None])


class LinearField(DistanceField):
    """``l(x) = max(0, w.x + c)``; the constraint set is the half-space ``w.x + c <= 0``.

    Exactly linear off the set, which makes it a convenient test fixture.
    """

    def __init__(self, w, c=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.c = float(c)
        self.dim = len(self.w)
        self.name = "linear"

    def _value_and_grad(self, x, sigma):
        z = x @ self.w + self.c
        pos = z > 0
        return np.where(pos, z, 0.0), np.where(pos[:, None], self.w, 0.0)

    def _member(self, x):
        return x @ self.w + self.c <= 0

    def tie_gap(self, x, sigma=0.0):
        xb, _ = as_batch(x, self.dim)
        return np.abs(xb @ self.w + self.c) / np.linalg.norm(self.w)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    n_points: int
    n_abs_compared: int
    max_abs_err_small: float

    def ok(self, tol: float, abs_tol: float = 1e-8) -> bool:
        return self.max_rel_err <= tol and self.max_abs_err_small <= abs_tol

    def __str__(self):
        return (f"fd-grad-check: max rel err {self.max_rel_err:.3e} over {self.n_points} points "
                f"(worst point {self.worst_index}; {self.n_abs_compared} near-zero gradients, "
                f"max abs err {self.max_abs_err_small:.1e})")


def fd_grad_check(field: DistanceField, points, h: float = 1e-6, sigma=0.0, abs_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients with central differences, point by point.

    The error at a point is ``|fd - g| / max(|fd|, |g|)`` (Euclidean norms).
    Points where both norms are below ``abs_floor`` are compared absolutely
    instead.  Callers keep ``points`` away from the field's
    non-differentiability sets (see :meth:`DistanceField.tie_gap`).
    """
    x, _ = as_batch(points, field.dim)
    _, g = field.value_and_grad(x, sigma)
    fd = np.empty_like(g)
    for j in range(field.dim):
        e = np.zeros(field.dim)
        e[j] = h
        fd[:, j] = (field.value(x + e, sigma) - field.value(x - e, sigma)) / (2 * h)
    diff = np.linalg.norm(fd - g, axis=1)
    scale = np.maximum(np.linalg.norm(fd, axis=1), np.linalg.norm(g, axis=1))
    small = scale < abs_floor
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    worst = int(np.argmax(rel)) if len(rel) else -1
    return GradCheckReport(
        max_rel_err=float(rel.max()) if len(rel) else 0.0,
        worst_index=worst,
        n_points=len(x),
        n_abs_compared=int(small.sum()),
        max_abs_err_small=float(diff[small].max()) if small.any() else 0.0,
    )

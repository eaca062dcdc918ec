"""Sample metrics and bridge diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from mbdm.diffusion import NoiseSchedule, ValidationSet
from mbdm.errors import DomainError


def infraction_rate(membership: dict[str, np.ndarray]) -> dict[str, float]:
    """Fraction of rows violating each constraint and any constraint (``overall``)."""
    if not membership:
        raise DomainError("no constraints given")
    arrays = {k: np.asarray(v, dtype=bool) for k, v in membership.items()}
    n = {len(v) for v in arrays.values()}
    if len(n) != 1:
        raise DomainError("membership arrays differ in length")
    n = n.pop()
    if n == 0:
        raise DomainError("infraction rate of an empty batch is undefined")
    out = {k: float((~v).mean()) for k, v in arrays.items()}
    ok = np.logical_and.reduce(list(arrays.values()))
    out["overall"] = float((~ok).mean())
    return out


def infraction_loss(x, fields) -> dict[str, float]:
    """Mean distance-field value at zero noise, per field and summed (``overall``)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise DomainError("infraction loss of an empty batch is undefined")
    out = {f.name: float(np.mean(f.value(x, 0.0))) for f in fields}
    out["overall"] = float(sum(out.values()))
    return out


def r_elbo(model, validation: ValidationSet) -> float:
    return validation.r_elbo(model)


def _mean_pair_distance(a, b, exclude_diagonal: bool, chunk: int = 1000) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        blk = a[i:i + chunk]
        # |a|^2 + |b|^2 - 2 a.b, clipped against round-off
        d2 = (blk * blk).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * blk @ b.T
        total += float(np.sqrt(np.maximum(d2, 0.0)).sum())
        if exclude_diagonal:
            # the diagonal can be a tiny positive number from round-off
            idx = np.arange(i, i + len(blk))
            diag = (blk * blk).sum(1) + (b[idx] * b[idx]).sum(1) - 2.0 * (blk * b[idx]).sum(1)
            total -= float(np.sqrt(np.maximum(diag, 0.0)).sum())
    n_pairs = len(a) * (len(b) - 1) if exclude_diagonal else len(a) * len(b)
    return total / n_pairs


def energy_distance(x, y) -> float:
    """Energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with unbiased within-sample terms."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise DomainError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if len(x) < 2 or len(y) < 2:
        raise DomainError("energy distance needs at least two points per sample")
    xy = _mean_pair_distance(x, y, False)
    xx = _mean_pair_distance(x, x, True)
    yy = _mean_pair_distance(y, y, True)
    return 2.0 * xy - xx - yy


dist_distance = energy_distance


@dataclass
class PLRow:
    sigma: float
    mean_value: float
    se_value: float
    mean_grad_sq: float
    se_grad_sq: float
    se_diff: float
    violated: bool
    beta: float | None = None
    rho: float | None = None

    @property
    def holds(self) -> bool:
        return self.mean_value <= self.mean_grad_sq


def pl_diagnostic(field, draw: Callable[[float, int, np.random.Generator], np.ndarray], sigmas, n: int = 10_000,
                  seed: int = 0, drift=None, sched: NoiseSchedule = NoiseSchedule()) -> list[PLRow]:
    """Check ``E[l] <= E[|grad l|^2]`` at each noise level by Monte Carlo.

    ``draw(sigma, n, rng)`` supplies points at that level.  A level is
    flagged when ``E[l] - E[|grad l|^2]`` exceeds three paired standard
    errors.  ``beta`` (needs ``drift(x, sigma)``) and ``rho`` are filled in
    only for fields exposing an analytic Hessian trace.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for s in np.atleast_1d(np.asarray(sigmas, dtype=np.float64)):
        x = draw(float(s), n, rng)
        val, grad = field.value_and_grad(x, float(s))
        g2 = (grad * grad).sum(axis=1)
        diff = val - g2
        se = lambda a: float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else float("inf")
        row = PLRow(float(s), float(val.mean()), se(val), float(g2.mean()), se(g2), se(diff),
                    bool(diff.mean() > 3 * se(diff)))
        trace = field.hessian_trace(x, float(s))
        if trace is not None:
            u = sched.u_of_sigma(s)
            # shipped Hessian-capable fields do not depend on the noise level
            row.rho = float(np.mean(0.5 * trace * sched.g_squared(u)))
            if drift is not None:
                row.beta = float(np.mean((grad * drift(x, float(s))).sum(axis=1)))
        rows.append(row)
    return rows


def zeta_diagnostic(gamma: Callable, t_grid, sched: NoiseSchedule = NoiseSchedule(), rtol: float = 1e-11) -> np.ndarray:
    """``log zeta(t) = integral_t^1 gamma(sigma(s)) ds`` for each ``t`` in ``t_grid``.

    Time runs over ``[0, 1]`` with ``sigma(s)`` the log-linear schedule.
    Each gap of the sorted grid is integrated by adaptive Gauss-Kronrod
    quadrature and the pieces are accumulated from ``t = 1`` downwards.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise DomainError("t must lie in [0, 1]")
    f = lambda s: float(gamma(sched.sigma(s)))
    knots = np.unique(np.concatenate([t, [1.0]]))[::-1]
    acc = {1.0: 0.0}
    total = 0.0
    for hi, lo in zip(knots[:-1], knots[1:]):
        total += integrate.quad(f, lo, hi, epsabs=0.0, epsrel=rtol, limit=200)[0]
        acc[float(lo)] = total
    return np.array([acc[float(v)] for v in t])

"""Reverse-time integration on a log-linear noise grid.

Both solvers work directly in noise level.  Euler-Maruyama discretizes the
reverse SDE in ``sigma^2``; Heun integrates the probability-flow ODE
``dx/dsigma = -sigma * score`` with a trapezoidal corrector after optional
churn noise.  Every run ends with one deterministic step from ``sigma_min``
to zero.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mbdm.diffusion import SIGMA_MAX, SIGMA_MIN
from mbdm.errors import ConfigError, NumericFailure

SOLVERS = ("euler-maruyama", "heun")
CHUNK = 1000

ScoreFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    solver: str = "heun"
    s_churn: float = 10.0
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if self.s_churn < 0:
            raise ConfigError("s_churn must be non-negative")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("sampler needs 0 < sigma_min < sigma_max")

    @property
    def gamma_churn(self) -> float:
        return min(self.s_churn / self.steps, math.sqrt(2.0) - 1.0)


def sigma_grid(steps: int, sigma_max: float = SIGMA_MAX, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """``steps + 1`` log-spaced levels from ``sigma_max`` down to ``sigma_min``."""
    if steps < 1:
        raise ConfigError("sampler needs at least one step")
    g = np.geomspace(sigma_max, sigma_min, steps + 1)
    g[0], g[-1] = sigma_max, sigma_min
    return g


def _check(x, step):
    bad = ~np.isfinite(x).all(axis=-1)
    if np.any(bad):
        raise NumericFailure("non-finite sample", step=step, index=int(np.argmax(np.atleast_1d(bad))))


def em_step(x, sigma_cur, sigma_next, score_fn: ScoreFn, rng=None, z=None, step: int | None = None, check=True):
    """One Euler-Maruyama step; noise is skipped when ``sigma_next == 0``."""
    if not sigma_cur > sigma_next >= 0:
        raise ConfigError("em_step needs sigma_cur > sigma_next >= 0")
    dv = sigma_cur**2 - sigma_next**2
    out = x + dv * score_fn(x, sigma_cur)
    if sigma_next > 0:
        if z is None:
            z = rng.standard_normal(np.shape(x))
        out = out + math.sqrt(dv) * z
    if check:
        _check(out, step)
    return out


def heun_step(x, sigma_cur, sigma_next, score_fn: ScoreFn, gamma_churn: float = 0.0, rng=None, z=None,
              step: int | None = None, check=True):
    """Churn to ``sigma_cur * (1 + gamma_churn)``, then a Heun step of the probability-flow ODE.

    The corrector is skipped when ``sigma_next == 0`` (plain Euler).
    """
    if not sigma_cur > sigma_next >= 0:
        raise ConfigError("heun_step needs sigma_cur > sigma_next >= 0")
    sigma_hat = sigma_cur * (1.0 + gamma_churn)
    x_hat = x
    if gamma_churn > 0:
        if z is None:
            z = rng.standard_normal(np.shape(x))
        x_hat = x + math.sqrt(sigma_hat**2 - sigma_cur**2) * z
    h = sigma_next - sigma_hat
    d = -sigma_hat * score_fn(x_hat, sigma_hat)
    out = x_hat + h * d
    if sigma_next > 0:
        d2 = -sigma_next * score_fn(out, sigma_next)
        out = x_hat + h * 0.5 * (d + d2)
    if check:
        _check(out, step)
    return out


def final_step(x, sigma_min, score_fn: ScoreFn):
    """Deterministic Euler step from ``sigma_min`` to zero."""
    return x + sigma_min**2 * score_fn(x, sigma_min)


@dataclass
class SampleBatch:
    x: np.ndarray
    n_requested: int
    n_failed: int = 0
    membership: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def valid(self) -> np.ndarray:
        v = np.ones(len(self.x), dtype=bool)
        for m in self.membership.values():
            v &= m
        return v

    def summary(self) -> dict:
        out = {"requested": self.n_requested, "returned": int(len(self.x)), "failed": self.n_failed,
               "valid": int(self.valid.sum())}
        for name, m in self.membership.items():
            out[f"violations.{name}"] = int((~m).sum())
        return out


def _guarded(score_fn: ScoreFn):
    """Wrap a score so numeric failures mark rows instead of aborting the batch.

    Returns ``f(x, sigma) -> (score, ok)``; failing batches are bisected to
    isolate the offending rows.
    """
    def run(x, sigma):
        try:
            s = score_fn(x, sigma)
            ok = np.isfinite(s).all(axis=1)
            return s, ok
        except NumericFailure:
            if len(x) == 1:
                return np.full_like(x, np.nan), np.zeros(1, dtype=bool)
            mid = len(x) // 2
            s1, ok1 = run(x[:mid], sigma)
            s2, ok2 = run(x[mid:], sigma)
            return np.concatenate([s1, s2]), np.concatenate([ok1, ok2])
    return run


def _run_chunk(score_fn: ScoreFn, n: int, dim: int, cfg: SamplerConfig, chunk_index: int):
    rng = np.random.default_rng([cfg.seed, chunk_index])
    sigmas = sigma_grid(cfg.steps, cfg.sigma_max, cfg.sigma_min)
    x = cfg.sigma_max * rng.standard_normal((n, dim))
    alive = np.ones(n, dtype=bool)
    guarded = _guarded(score_fn)
    gc = cfg.gamma_churn

    def masked(xx, sigma):
        # the guarded score flags failures by returning NaN rows
        s, ok = guarded(xx, sigma)
        return np.where(ok[:, None], s, np.nan)

    for i in range(cfg.steps):
        # draw noise for every row so the stream does not depend on failures
        z = rng.standard_normal((n, dim))
        live = np.flatnonzero(alive)
        if len(live) == 0:
            break
        xs = x[live]
        if cfg.solver == "heun":
            xs = heun_step(xs, sigmas[i], sigmas[i + 1], masked, gc, z=z[live], check=False)
        else:
            xs = em_step(xs, sigmas[i], sigmas[i + 1], masked, z=z[live], check=False)
        x[live] = xs
        alive[live] = np.isfinite(xs).all(axis=1)
    live = np.flatnonzero(alive)
    if len(live):
        x[live] = final_step(x[live], cfg.sigma_min, masked)
        alive[live] = np.isfinite(x[live]).all(axis=1)
    return x[alive], int((~alive).sum())


def sample(score_fn: ScoreFn, n: int, dim: int, cfg: SamplerConfig = SamplerConfig(), constraints=(),
           workers: int = 1) -> SampleBatch:
    """Draw ``n`` samples by integrating from ``N(0, sigma_max^2 I)`` to zero noise.

    Chains are processed in chunks of ``CHUNK`` with an independent random
    stream per chunk, so results do not depend on ``workers``.  Rows that hit
    a numeric failure are dropped and counted.  ``constraints`` are objects
    with ``name`` and ``member``; their verdicts fill ``membership``.
    """
    if n < 0:
        raise ConfigError("sample count must be >= 0")
    sizes = [min(CHUNK, n - a) for a in range(0, n, CHUNK)]
    jobs = [(size, c) for c, size in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda j: _run_chunk(score_fn, j[0], dim, cfg, j[1]), jobs))
    else:
        results = [_run_chunk(score_fn, size, dim, cfg, c) for size, c in jobs]
    xs = [r[0] for r in results]
    x = np.concatenate(xs) if xs else np.zeros((0, dim))
    failed = sum(r[1] for r in results)
    membership = {}
    for c in constraints:
        membership[c.name] = np.asarray(c.member(x), dtype=bool) if len(x) else np.zeros(0, dtype=bool)
    return SampleBatch(x, n, failed, membership)

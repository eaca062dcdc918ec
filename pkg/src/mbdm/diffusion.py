"""Variance-exploding diffusion: noise schedule, denoising objective and training.

The forward marginal is ``x_t = x_0 + sigma * eps``.  Losses are weighted by
``sigma^2``, so with a network that predicts the noise the per-example loss
is ``|eps + sigma * offset - eps_hat|^2`` where ``offset`` is whatever the
architecture adds to the network score (zero for unbridged models).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mbdm.bridges import ARCHITECTURES, Bridge, ComposedScore, conditioning_width
from mbdm.errors import ConfigError, DataValidationError, DomainError, NumericFailure
from mbdm.nn.adam import AdamState, adam_step
from mbdm.nn.mlp import MlpParams, init_mlp, loss_and_grad, mlp_forward

SIGMA_MIN = 3e-5
SIGMA_MAX = 80.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-linear noise levels, ``sigma(u) = sigma_min * (sigma_max / sigma_min) ** u``."""

    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ConfigError("noise schedule needs 0 < sigma_min < sigma_max")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def sigma(self, u):
        return sigma_of_u(u, self)

    def u_of_sigma(self, sigma):
        return np.log(np.asarray(sigma, dtype=np.float64) / self.sigma_min) / self.log_ratio

    def g_squared(self, u):
        """Diffusion coefficient ``d sigma^2 / du``; the drift is zero."""
        s = sigma_of_u(u, self)
        return 2.0 * s * s * self.log_ratio

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sigma_of_u(rng.random(n), self)


def sigma_of_u(u, sched: NoiseSchedule = NoiseSchedule()):
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u > 1)):
        raise DomainError("u must lie in [0, 1]")
    out = sched.sigma_min * np.exp(u * sched.log_ratio)
    return float(out) if out.ndim == 0 else out


def perturb(x0, sigma, rng: np.random.Generator):
    x0 = np.asarray(x0, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s < 0):
        raise DomainError("sigma must be non-negative")
    if s.ndim == 1 and x0.ndim == 2:
        s = s[:, None]
    return x0 + s * rng.standard_normal(x0.shape)


def score_target(x0, x_t, sigma):
    """Score of ``N(x_t; x0, sigma^2 I)`` with respect to ``x_t``."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise DomainError("score target needs sigma > 0")
    if s.ndim == 1:
        s = s[:, None]
    return (np.asarray(x0, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)) / (s * s)


def estimate_sigma_data(x: np.ndarray) -> float:
    """Root mean per-coordinate variance of a dataset."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return 0.5
    v = float(np.mean(np.var(x, axis=0)))
    return math.sqrt(v) if v > 0 else 0.5


def noise_target(model: ComposedScore, x0, sigma, eps):
    """Network inputs and the noise target for one batch."""
    s = np.asarray(sigma, dtype=np.float64)[:, None]
    x_t = x0 + s * eps
    prep = model.prepare(x_t, sigma)
    target = eps + s * prep[3] if model.offset else eps
    bad = ~np.isfinite(target).all(axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericFailure("non-finite loss target", sigma=float(s[i, 0]), index=i)
    return prep, target


def per_example_loss(model: ComposedScore, x0, sigma, eps, weights=None) -> np.ndarray:
    """``sigma^2 |s(x_t) - target score|^2`` for each row (no graph)."""
    prep, target = noise_target(model, x0, sigma, eps)
    if model.params is None:
        resid = target
    else:
        resid = mlp_forward(model.params, prep[0], prep[1], prep[2], weights=weights) - target
    out = (resid * resid).sum(axis=1)
    bad = ~np.isfinite(out)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericFailure("non-finite loss", sigma=float(np.asarray(sigma)[i]), index=i)
    return out


def denoising_loss(model: ComposedScore, x0, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of the weighted denoising objective on one batch."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    sigma = sched.sample(len(x0), rng)
    eps = rng.standard_normal(x0.shape)
    return float(per_example_loss(model, x0, sigma, eps).mean())


@dataclass
class ValidationSet:
    """Held-out points, a fixed grid of noise levels and frozen noise draws."""

    x0: np.ndarray
    sigmas: np.ndarray
    eps: np.ndarray   # (n_sigma, n, d)

    @classmethod
    def build(cls, x0, sched: NoiseSchedule = NoiseSchedule(), n_sigma: int = 64, seed: int = 0) -> "ValidationSet":
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        sigmas = np.geomspace(sched.sigma_min, sched.sigma_max, n_sigma)
        eps = np.random.default_rng(seed).standard_normal((n_sigma,) + x0.shape)
        return cls(x0, sigmas, eps)

    def loss(self, model: ComposedScore, chunk: int = 8192) -> float:
        n, d = self.x0.shape
        if n == 0:
            return float("nan")
        x0 = np.broadcast_to(self.x0, (len(self.sigmas), n, d)).reshape(-1, d)
        sig = np.repeat(self.sigmas, n)
        eps = self.eps.reshape(-1, d)
        total = 0.0
        for a in range(0, len(x0), chunk):
            total += float(per_example_loss(model, x0[a:a + chunk], sig[a:a + chunk], eps[a:a + chunk]).sum())
        return total / len(x0)

    def r_elbo(self, model: ComposedScore) -> float:
        return -self.loss(model)


@dataclass
class TrainConfig:
    iterations: int = 20_000
    batch_size: int = 1000
    lr: float = 3e-4
    seed: int = 0
    arch: str = "plain"
    hidden: int = 256
    blocks: int = 2
    embed_dim: int = 128
    val_fraction: float = 0.1
    val_sigmas: int = 64
    log_every: int = 100
    checkpoint_every: int = 0

    def validate(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("log_every must be >= 1 and checkpoint_every >= 0")


@dataclass
class TrainState:
    params: MlpParams
    adam: AdamState
    iteration: int
    rng: np.random.Generator
    sigma_data: float
    history: list[tuple[int, float, float]] = field(default_factory=list)


def split_dataset(data: np.ndarray, val_fraction: float, seed: int):
    """Deterministic shuffle-and-split into ``(train, validation)``."""
    perm = np.random.default_rng([seed, 1]).permutation(len(data))
    n_val = int(round(val_fraction * len(data)))
    if val_fraction > 0 and len(data) > 1:
        n_val = min(max(n_val, 1), len(data) - 1)
    return data[perm[n_val:]], data[perm[:n_val]]


def check_members(data: np.ndarray, bridges: list[Bridge]):
    for b in bridges:
        ok = np.asarray(b.member(data))
        if not ok.all():
            i = int(np.argmin(ok))
            raise DataValidationError(f"data point {i} violates constraint {b.name}", index=i)


def init_state(cfg: TrainConfig, dim: int, bridges: list[Bridge], sigma_data: float) -> TrainState:
    cond = conditioning_width(bridges, dim) if cfg.arch in ("C", "MBM") else 0
    params = init_mlp(dim, cfg.hidden, cfg.blocks, cfg.embed_dim, cond, rng=np.random.default_rng([cfg.seed, 3]))
    adam = AdamState.zeros_like(params.arrays, lr=cfg.lr)
    return TrainState(params, adam, 0, np.random.default_rng(cfg.seed), sigma_data)


def train(cfg: TrainConfig, data, bridges: list[Bridge] | None = None, sched: NoiseSchedule = NoiseSchedule(),
          state: TrainState | None = None,
          on_log: Callable[[int, float, float], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run Adam on the denoising objective up to ``cfg.iterations`` total steps.

    Passing ``state`` resumes from it.  Every ``log_every`` steps the mean
    training loss since the previous log and the validation r-ELBO are
    appended to ``state.history`` and passed to ``on_log``.
    """
    cfg.validate()
    bridges = list(bridges or [])
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(data) == 0:
        raise DataValidationError("training set is empty")
    if bridges:
        check_members(data, bridges)
    if cfg.arch != "plain" and not bridges:
        raise ConfigError(f"{cfg.arch} architecture needs a bridge")
    train_x, val_x = split_dataset(data, cfg.val_fraction, cfg.seed)
    if state is None:
        state = init_state(cfg, data.shape[1], bridges, estimate_sigma_data(train_x))
    val = ValidationSet.build(val_x if len(val_x) else train_x, sched, cfg.val_sigmas, seed=cfg.seed + 1)
    model_bridges = bridges if cfg.arch != "plain" else []

    def model_for(params):
        return ComposedScore(cfg.arch, params, model_bridges, state.sigma_data)

    running, n_running = 0.0, 0
    while state.iteration < cfg.iterations:
        rng = state.rng
        idx = rng.integers(0, len(train_x), size=cfg.batch_size)
        x0 = train_x[idx]
        sigma = sched.sample(cfg.batch_size, rng)
        eps = rng.standard_normal(x0.shape)
        model = model_for(state.params)
        prep, target = noise_target(model, x0, sigma, eps)
        scale = 1.0 / cfg.batch_size

        def closure(weights):
            r = mlp_forward(state.params, prep[0], prep[1], prep[2], weights=weights) - target
            return r.square().sum() * scale

        loss, grads = loss_and_grad(state.params, closure)
        arrays, adam = adam_step(state.params.arrays, grads, state.adam)
        state.params = state.params.with_arrays(arrays)
        state.adam = adam
        state.iteration += 1
        running += loss
        n_running += 1
        if state.iteration % cfg.log_every == 0 or state.iteration == cfg.iterations:
            r = val.r_elbo(model_for(state.params))
            row = (state.iteration, running / n_running, r)
            state.history.append(row)
            if on_log is not None:
                on_log(*row)
            running, n_running = 0.0, 0
        if on_checkpoint is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state


def model_from_state(state: TrainState, arch: str, bridges: list[Bridge]) -> ComposedScore:
    return ComposedScore(arch, state.params, list(bridges) if arch != "plain" else [], state.sigma_data)

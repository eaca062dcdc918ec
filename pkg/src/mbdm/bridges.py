"""Bridges that steer the reverse process into a constraint set, and the
score architectures that combine them with a network.

A manual bridge is ``-gamma(sigma) * grad l(x, sigma)`` for a distance field
``l``.  Bridges add: the sum of several bridges targets the intersection of
their sets.  The interval bridge is the exact expected conditional score for
a product of intervals under a Gaussian posterior.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfcx, ndtr

from mbdm.constraints.base import DistanceField, as_batch
from mbdm.constraints.polytope import BoxField
from mbdm.errors import ConfigError, DomainError, NumericFailure
from mbdm.nn.mlp import MlpParams, mlp_forward, sinusoidal_embed

ARCHITECTURES = ("plain", "C", "DB", "MBM")
GAMMA_KINDS = ("inverse", "watermark")


class EmptyIntersectionWarning(UserWarning):
    pass


def _sigma_column(sigma, n):
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        return np.full((n, 1), float(s))
    return s.reshape(n, 1)


@dataclass(frozen=True)
class GammaSchedule:
    """Bridge weight as a function of noise level.

    ``inverse``: ``1 / (k sigma^2)``.
    ``watermark``: ``sigma_data^2 / (sigma^2 (sigma^2 + sigma_data^2))``.
    """

    kind: str = "inverse"
    k: float = 1.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.kind not in GAMMA_KINDS:
            raise ConfigError(f"unknown gamma kind {self.kind!r}; expected one of {GAMMA_KINDS}")
        if self.k <= 0 or self.sigma_data <= 0:
            raise ConfigError("gamma parameters must be positive")

    def __call__(self, sigma):
        s = np.asarray(sigma, dtype=np.float64)
        if np.any(s <= 0):
            raise DomainError("gamma is only defined for sigma > 0")
        s2 = s * s
        if self.kind == "inverse":
            out = 1.0 / (self.k * s2)
        else:
            sd2 = self.sigma_data**2
            out = sd2 / (s2 * (s2 + sd2))
        return float(out) if out.ndim == 0 else out


def gamma_eval(g: GammaSchedule, sigma):
    return g(sigma)


def conditioning_weight(sigma, sigma_data: float):
    """``sigma_data / sqrt(sigma^2 + sigma_data^2)``: unit at sigma 0, vanishing as sigma grows."""
    s = np.asarray(sigma, dtype=np.float64)
    return sigma_data / np.sqrt(s * s + sigma_data**2)


@dataclass
class BridgeTerms:
    """Everything one bridge contributes at a batch of points."""

    vector: np.ndarray      # (B, d) bridge after clamping
    direction: np.ndarray   # (B, d) the direction fed to conditioning (grad l for manual bridges)
    active: np.ndarray      # (B,) pre-clamp bridge nonzero anywhere


class Bridge:
    """Common interface: ``terms(x, sigma)``, ``__call__`` and exact ``member``."""

    dim: int
    name = "bridge"

    def terms(self, x, sigma) -> BridgeTerms:  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, x, sigma):
        xb, single = as_batch(x, self.dim)
        v = self.terms(xb, sigma).vector
        return v[0] if single else v

    def member(self, x):  # pragma: no cover - abstract
        raise NotImplementedError

    def value(self, x, sigma=0.0):
        """Distance-field value used for infraction loss."""
        raise NotImplementedError

    @property
    def parts(self) -> list["Bridge"]:
        return [self]


class ManualBridge(Bridge):
    def __init__(self, field: DistanceField, gamma: GammaSchedule, clamp: float | None = None, name: str | None = None):
        if clamp is not None and clamp <= 0:
            raise ConfigError("bridge clamp must be positive")
        self.field = field
        self.gamma = gamma
        self.clamp = clamp
        self.dim = field.dim
        self.name = name or field.name

    def terms(self, x, sigma):
        n = len(x)
        _, grad = self.field.value_and_grad(x, sigma)
        bad = ~np.isfinite(grad).all(axis=1)
        if bad.any():
            raise NumericFailure("non-finite distance gradient", bridge=self.name, index=int(np.argmax(bad)))
        g = self.gamma(_sigma_column(sigma, n))
        b = -g * grad
        active = (b != 0).any(axis=1)
        if self.clamp is not None:
            norm = np.linalg.norm(b, axis=1, keepdims=True)
            over = norm > self.clamp
            b = np.where(over, b * (self.clamp / np.where(over, norm, 1.0)), b)
        return BridgeTerms(b, grad, active)

    def member(self, x):
        return self.field.member(x)

    def value(self, x, sigma=0.0):
        return self.field.value(x, sigma)


def bridge_eval(b: Bridge, x, sigma):
    return b(x, sigma)


def truncated_normal_ratio(alpha, beta):
    """``(phi(alpha) - phi(beta)) / (Phi(beta) - Phi(alpha))`` for ``alpha < beta``.

    When both limits are on the same side of zero the difference of normal
    tails is rewritten with scaled complementary error functions, which stays
    accurate arbitrarily far into the tail.
    """
    a = np.asarray(alpha, dtype=np.float64)
    b = np.asarray(beta, dtype=np.float64)
    a, b = np.broadcast_arrays(a, b)
    out = np.empty(a.shape)

    inner = (a < 0) & (b > 0)
    ai, bi = a[inner], b[inner]
    phi = lambda z: np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    out[inner] = (phi(ai) - phi(bi)) / (ndtr(bi) - ndtr(ai))

    right = ~inner & (a >= 0)
    left = ~inner & ~right
    out[right] = _tail_ratio(a[right], b[right])
    out[left] = -_tail_ratio(-b[left], -a[left])
    return out


def _tail_ratio(a, b):
    # 0 <= a < b
    delta = 0.5 * (b - a) * (b + a)
    e = np.exp(-delta)
    num = -np.expm1(-delta)
    den = erfcx(a / math.sqrt(2)) - e * erfcx(b / math.sqrt(2))
    return (2.0 / math.sqrt(2 * math.pi)) * num / den


def truncated_normal_mean(mu, scale, lo, hi):
    """Mean of ``N(mu, scale^2)`` restricted to ``[lo, hi]``."""
    mu = np.asarray(mu, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    return mu + scale * truncated_normal_ratio((lo - mu) / scale, (hi - mu) / scale)


class IntervalBridge(Bridge):
    """Expected conditional score for a product of intervals.

    Per coordinate, ``(E[x0 | x, x0 in [lo, hi]] - x) / sigma^2`` where the
    posterior of ``x0`` is ``N(x, sigma^2)`` truncated to the interval.  With
    uniform data on the box this is exactly the score of the noisy marginal.
    """

    def __init__(self, lo, hi, name: str = "interval"):
        self.box = BoxField(lo, hi)
        self.lo, self.hi = self.box.lo, self.box.hi
        self.dim = self.box.dim
        self.name = name

    def terms(self, x, sigma):
        s = _sigma_column(sigma, len(x))
        if np.any(s <= 0):
            raise DomainError("interval bridge needs sigma > 0")
        ratio = truncated_normal_ratio((self.lo - x) / s, (self.hi - x) / s)
        b = ratio / s
        if not np.isfinite(b).all():
            raise NumericFailure("non-finite interval bridge", index=int(np.argmax(~np.isfinite(b).all(axis=1))))
        # x - E[x0]; tends to the projection residual as sigma -> 0
        direction = -s * ratio
        return BridgeTerms(b, direction, (b != 0).any(axis=1))

    def member(self, x):
        return self.box.member(x)

    def value(self, x, sigma=0.0):
        return self.box.value(x, sigma)


class CombinedBridge(Bridge):
    """Pointwise sum of bridges; membership is the conjunction of the parts."""

    def __init__(self, bridges: list[Bridge]):
        if not bridges:
            raise ConfigError("cannot combine an empty list of bridges")
        dims = {b.dim for b in bridges}
        if len(dims) != 1:
            raise ConfigError(f"bridges disagree on dimension: {sorted(dims)}")
        flat: list[Bridge] = []
        for b in bridges:
            flat.extend(b.parts)
        self._parts = flat
        self.dim = dims.pop()
        self.name = "+".join(b.name for b in flat)

    @property
    def parts(self):
        return list(self._parts)

    def terms(self, x, sigma):
        items = [b.terms(x, sigma) for b in self._parts]
        total = items[0].vector.copy()
        for t in items[1:]:
            total += t.vector
        return BridgeTerms(total, sum(t.direction for t in items), np.any([t.active for t in items], axis=0))

    def member(self, x):
        m = self._parts[0].member(x)
        for b in self._parts[1:]:
            m = m & b.member(x)
        return m

    def value(self, x, sigma=0.0):
        return sum(b.value(x, sigma) for b in self._parts)


def combine(bridges: list[Bridge], probe_box=None, n_probe: int = 10**6, seed: int = 0) -> CombinedBridge:
    """Sum bridges.  With ``probe_box=(lo, hi)`` rejection-sample the box and
    warn if no draw lands in every constraint set."""
    out = CombinedBridge(bridges)
    if probe_box is not None:
        lo = np.broadcast_to(np.asarray(probe_box[0], dtype=np.float64), (out.dim,))
        hi = np.broadcast_to(np.asarray(probe_box[1], dtype=np.float64), (out.dim,))
        rng = np.random.default_rng(seed)
        found = False
        done = 0
        while done < n_probe and not found:
            m = min(100_000, n_probe - done)
            found = bool(np.any(out.member(rng.uniform(lo, hi, size=(m, out.dim)))))
            done += m
        if not found:
            warnings.warn(f"no point of {n_probe} probe draws satisfies every constraint of {out.name}; "
                          "the intersection may be empty", EmptyIntersectionWarning, stacklevel=2)
    return out


def conditioning_width(bridges: list[Bridge], dim: int) -> int:
    return len(bridges) * (dim + 1)


def conditioning_signal(bridges: list[Bridge], x, sigma, sigma_data: float, terms: list[BridgeTerms] | None = None):
    """Concatenate ``-w(sigma) * direction`` and an activity indicator per bridge.

    ``w`` is :func:`conditioning_weight`.  ``terms`` may carry precomputed
    :class:`BridgeTerms` to avoid evaluating the fields twice.
    """
    xb, single = as_batch(x)
    if terms is None:
        terms = [b.terms(xb, sigma) for b in bridges]
    w = conditioning_weight(_sigma_column(sigma, len(xb)), sigma_data)
    blocks = []
    for t in terms:
        blocks.append(-w * t.direction)
        blocks.append(t.active[:, None].astype(np.float64))
    out = np.concatenate(blocks, axis=1) if blocks else np.zeros((len(xb), 0))
    return out[0] if single else out


def input_scale(sigma, sigma_data: float):
    s = np.asarray(sigma, dtype=np.float64)
    return 1.0 / np.sqrt(s * s + sigma_data**2)


@dataclass
class ComposedScore:
    """Score network plus bridges in one of four arrangements.

    ``plain``: network only.  ``C``: network conditioned on the bridges.
    ``DB``: network plus bridge sum.  ``MBM``: conditioned network plus
    bridge sum.  The network predicts the noise; its score is ``-eps / sigma``.
    ``params`` of ``None`` means a zero network.
    """

    arch: str
    params: MlpParams | None
    bridges: list[Bridge] = field(default_factory=list)
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.arch != "plain" and not self.bridges:
            raise ConfigError(f"{self.arch} architecture needs at least one bridge")
        if self.params is not None:
            want = conditioning_width(self.bridges, self.params.dim) if self.conditioned else 0
            if self.params.cond_dim != want:
                raise ConfigError(f"{self.arch} architecture needs conditioning width {want}, "
                                  f"network has {self.params.cond_dim}")
            dims = {b.dim for b in self.bridges}
            if dims and dims != {self.params.dim}:
                raise ConfigError("bridge and network dimensions differ")

    @property
    def conditioned(self) -> bool:
        return self.arch in ("C", "MBM")

    @property
    def offset(self) -> bool:
        return self.arch in ("DB", "MBM")

    @property
    def dim(self) -> int:
        if self.params is not None:
            return self.params.dim
        return self.bridges[0].dim

    def prepare(self, x, sigma):
        """Network inputs and bridge offset for a batch: ``(x_in, embed, cond, offset)``.

        ``offset`` is the bridge sum (zeros for unbridged arrangements).
        """
        n = len(x)
        s = _sigma_column(sigma, n)
        terms = [b.terms(x, sigma) for b in self.bridges] if (self.conditioned or self.offset) else []
        offset = np.zeros_like(x)
        if self.offset:
            for t in terms:
                offset += t.vector
        cond = conditioning_signal(self.bridges, x, sigma, self.sigma_data, terms) if self.conditioned else None
        embed_dim = self.params.embed_dim if self.params is not None else 0
        embed = sinusoidal_embed(s[:, 0], embed_dim) if embed_dim else None
        x_in = x * input_scale(s, self.sigma_data)
        return x_in, embed, cond, offset

    def network_eps(self, x, sigma, prepared=None, weights=None):
        if self.params is None:
            return np.zeros_like(x)
        x_in, embed, cond, _ = prepared if prepared is not None else self.prepare(x, sigma)
        return mlp_forward(self.params, x_in, embed, cond, weights=weights)

    def __call__(self, x, sigma):
        xb, single = as_batch(x, self.dim)
        prep = self.prepare(xb, sigma)
        s = _sigma_column(sigma, len(xb))
        out = -self.network_eps(xb, sigma, prep) / s + prep[3]
        return out[0] if single else out


def arch_compose(cs: ComposedScore, x, sigma):
    return cs(x, sigma)


def prior_score(bridges: list[Bridge]) -> ComposedScore:
    """Bridge-only score: a zero network with the bridges added."""
    return ComposedScore("DB", None, list(bridges))


def guidance_score(plain: ComposedScore, bridges: list[Bridge]) -> ComposedScore:
    """A frozen unconditioned network with bridges added at sampling time only."""
    if plain.arch != "plain":
        raise ConfigError("guidance needs a plain-architecture model")
    return ComposedScore("DB", plain.params, list(bridges), plain.sigma_data)

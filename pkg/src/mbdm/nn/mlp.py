"""Residual MLP score network and its sinusoidal noise-level embedding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mbdm.errors import ConfigError, NumericFailure
from mbdm.nn.autograd import Tensor, linear, silu

# geometric ladder of periods, 2*pi*1e-5 .. 2*pi*1e3
MIN_PERIOD = 2 * math.pi * 1e-5
MAX_PERIOD = 2 * math.pi * 1e3


def frequency_ladder(dim: int, min_period: float = MIN_PERIOD, max_period: float = MAX_PERIOD) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"embedding dimension must be even, got {dim}")
    n = dim // 2
    periods = np.geomspace(min_period, max_period, n) if n > 1 else np.array([max_period])
    return 2 * math.pi / periods


def sinusoidal_embed(sigma, dim: int, min_period: float = MIN_PERIOD, max_period: float = MAX_PERIOD) -> np.ndarray:
    """Embed ``log(sigma)`` as interleaved ``[sin, cos, sin, cos, ...]``.

    ``sigma`` may be a scalar (returns shape ``(dim,)``) or an array of
    shape ``(B,)`` (returns ``(B, dim)``).
    """
    freqs = frequency_ladder(dim, min_period, max_period)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ConfigError("sinusoidal_embed needs sigma > 0")
    phase = np.log(s)[..., None] * freqs
    out = np.empty(phase.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass
class MlpParams:
    """Weights of the residual MLP.

    Layers: an input projection from ``[x, cond, embed]`` to width ``hidden``,
    ``blocks`` residual blocks ``h + W2 silu(W1 silu(h) + b1) + b2`` and a
    final ``W_out silu(h) + b_out`` back to ``dim``.
    """

    dim: int
    hidden: int
    blocks: int
    embed_dim: int
    cond_dim: int = 0
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return self.dim + self.cond_dim + self.embed_dim

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = [("in.W", (self.in_dim, self.hidden)), ("in.b", (self.hidden,))]
        for r in range(self.blocks):
            shapes += [
                (f"block{r}.W1", (self.hidden, self.hidden)),
                (f"block{r}.b1", (self.hidden,)),
                (f"block{r}.W2", (self.hidden, self.hidden)),
                (f"block{r}.b2", (self.hidden,)),
            ]
        shapes += [("out.W", (self.hidden, self.dim)), ("out.b", (self.dim,))]
        return shapes

    def validate(self):
        expected = self.layer_shapes()
        if list(self.arrays) != [name for name, _ in expected]:
            raise ConfigError(f"parameter names {list(self.arrays)} do not match the layer table")
        for name, shape in expected:
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    def copy(self) -> "MlpParams":
        return MlpParams(self.dim, self.hidden, self.blocks, self.embed_dim, self.cond_dim,
                         {k: v.copy() for k, v in self.arrays.items()})

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "MlpParams":
        return MlpParams(self.dim, self.hidden, self.blocks, self.embed_dim, self.cond_dim, dict(arrays))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())


def init_mlp(dim: int, hidden: int = 256, blocks: int = 2, embed_dim: int = 128, cond_dim: int = 0,
             rng: np.random.Generator | None = None) -> MlpParams:
    """He-normal hidden layers, zero biases, zero output projection."""
    if embed_dim % 2:
        raise ConfigError(f"embedding dimension must be even, got {embed_dim}")
    if min(dim, hidden, embed_dim) < 1 or blocks < 0 or cond_dim < 0:
        raise ConfigError("MLP extents must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    params = MlpParams(dim, hidden, blocks, embed_dim, cond_dim)
    for name, shape in params.layer_shapes():
        if name.startswith("out.") or ".b" in name:
            params.arrays[name] = np.zeros(shape)
        else:
            params.arrays[name] = rng.standard_normal(shape) * math.sqrt(2.0 / shape[0])
    return params


def _check_finite(h, layer):
    data = h.data if isinstance(h, Tensor) else h
    if not np.isfinite(data).all():
        raise NumericFailure("non-finite activation", layer=layer)


def mlp_forward(params: MlpParams, x, embed, cond=None, weights=None):
    """Raw network output for a batch.

    ``x`` is ``(B, dim)``, ``embed`` is ``(B, embed_dim)`` (or ``(embed_dim,)``,
    broadcast over the batch), ``cond`` is ``(B, cond_dim)`` and must be given
    exactly when ``cond_dim > 0``.  ``weights`` overrides ``params.arrays``;
    passing :class:`Tensor` weights builds an autodiff graph.
    """
    w = params.arrays if weights is None else weights
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != params.dim:
        raise ConfigError(f"input has {x.shape[1]} features, network expects {params.dim}")
    embed = np.asarray(embed, dtype=np.float64)
    if embed.ndim == 1:
        embed = np.broadcast_to(embed, (x.shape[0], embed.shape[0]))
    if embed.shape != (x.shape[0], params.embed_dim):
        raise ConfigError(f"embedding shape {embed.shape} does not match ({x.shape[0]}, {params.embed_dim})")
    parts = [x]
    if params.cond_dim:
        if cond is None:
            raise ConfigError("network was built with a conditioning input but none was given")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = cond[None, :]
        if cond.shape != (x.shape[0], params.cond_dim):
            raise ConfigError(f"conditioning shape {cond.shape} does not match ({x.shape[0]}, {params.cond_dim})")
        parts.append(cond)
    elif cond is not None:
        raise ConfigError("conditioning given to a network without a conditioning input")
    parts.append(embed)
    inp = np.concatenate(parts, axis=1)

    h = linear(inp, w["in.W"], w["in.b"])
    _check_finite(h, 0)
    for r in range(params.blocks):
        u = linear(silu(h), w[f"block{r}.W1"], w[f"block{r}.b1"])
        h = h + linear(silu(u), w[f"block{r}.W2"], w[f"block{r}.b2"])
        _check_finite(h, r + 1)
    out = linear(silu(h), w["out.W"], w["out.b"])
    _check_finite(out, params.blocks + 1)
    if single and not isinstance(out, Tensor):
        return out[0]
    return out


def loss_and_grad(params: MlpParams, batch_loss):
    """Evaluate ``batch_loss(weights)`` and its gradient in one backward pass.

    ``batch_loss`` receives a dict of leaf :class:`Tensor` objects keyed like
    ``params.arrays`` and must return a scalar :class:`Tensor`.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
    loss = batch_loss(leaves)
    if not isinstance(loss, Tensor):
        raise ConfigError("loss closure must return an engine Tensor")
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(loss.data), grads

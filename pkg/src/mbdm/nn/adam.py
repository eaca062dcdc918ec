from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mbdm.errors import ConfigError, NumericFailure


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in arrays.items()},
                   v={k: np.zeros_like(a) for k, a in arrays.items()}, **hyper)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.

    Returns ``(new_arrays, new_state)``; the inputs are left untouched, so a
    NaN gradient (which raises) leaves the caller's parameters as they were.
    """
    if set(grads) != set(arrays):
        raise ConfigError("gradient names do not match parameter names")
    for k, g in grads.items():
        if g.shape != arrays[k].shape:
            raise ConfigError(f"{k}: gradient shape {g.shape} != parameter shape {arrays[k].shape}")
        if not np.isfinite(g).all():
            raise NumericFailure("non-finite gradient", tensor=k)
    if not state.m:
        state = AdamState.zeros_like(arrays, lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                                     eps=state.eps, step=state.step)

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for k, p in arrays.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_arrays[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_arrays, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)

"""End-to-end runs comparing score architectures on the synthetic problems."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from mbdm.bridges import ComposedScore, GammaSchedule, ManualBridge
from mbdm.constraints.base import NormalizedField
from mbdm.constraints.checkerboard import Checkerboard
from mbdm.datagen import gen_checkerboard_triangles, gen_polytope_data, gen_toy_scenes
from mbdm.diffusion import NoiseSchedule, TrainConfig, ValidationSet, split_dataset, train
from mbdm.metrics import infraction_rate
from mbdm.sampler import SamplerConfig, sample

SCENE_CLAMP = 1e3


@dataclass
class ArchResult:
    arch: str
    infraction: dict[str, float]
    r_elbo: float
    n_failed: int
    train_seconds: float
    sample_seconds: float
    history: list = field(default_factory=list)

    def line(self) -> str:
        return (f"{self.arch:>5}: infraction {100 * self.infraction['overall']:6.2f}%  "
                f"r-ELBO {self.r_elbo:9.5f}  failed {self.n_failed}  "
                f"train {self.train_seconds:6.0f}s  sample {self.sample_seconds:5.0f}s")


def run_architectures(data, bridges, archs, train_cfg: TrainConfig, sampler_cfg: SamplerConfig,
                      n_samples: int, sched: NoiseSchedule = NoiseSchedule(), log=None) -> dict[str, ArchResult]:
    """Train one model per architecture on ``data`` and sample from each.

    All models share the data split, the validation noise and the sampler
    seed, so their metrics are directly comparable.
    """
    _, val_x = split_dataset(data, train_cfg.val_fraction, train_cfg.seed)
    val = ValidationSet.build(val_x, sched, train_cfg.val_sigmas, seed=train_cfg.seed + 1)
    out = {}
    for arch in archs:
        cfg = TrainConfig(**{**train_cfg.__dict__, "arch": arch})
        t0 = time.perf_counter()
        state = train(cfg, data, bridges, sched)
        t1 = time.perf_counter()
        model = ComposedScore(arch, state.params, list(bridges) if arch != "plain" else [], state.sigma_data)
        batch = sample(model, n_samples, data.shape[1], sampler_cfg, constraints=bridges)
        t2 = time.perf_counter()
        res = ArchResult(arch, infraction_rate(batch.membership), val.r_elbo(model), batch.n_failed,
                         t1 - t0, t2 - t1, state.history)
        out[arch] = res
        if log is not None:
            log(res.line())
    return out


def checkerboard_setup(n: int = 1000, seed: int = 0):
    data = gen_checkerboard_triangles(n, seed)
    bridge = ManualBridge(Checkerboard(), GammaSchedule("inverse", 1.0), name="checkerboard")
    return data, [bridge]


def watermark_setup(n: int = 2000, d: int = 16, m: int = 4, seed: int = 0):
    data, poly = gen_polytope_data(n, d, m, seed)
    sigma_data = float(np.sqrt(np.mean(np.var(data, axis=0))))
    bridge = ManualBridge(poly, GammaSchedule("watermark", sigma_data=sigma_data), name="polytope")
    return data, [bridge]


def scene_setup(n_scenes: int = 2000, n_agents: int = 4, seed: int = 0):
    data, geom = gen_toy_scenes(n_scenes, n_agents, seed)
    collision = ManualBridge(NormalizedField(geom.collision()), GammaSchedule("inverse", 10.0),
                             clamp=SCENE_CLAMP, name="collision")
    offroad = ManualBridge(NormalizedField(geom.offroad()), GammaSchedule("inverse", 100.0),
                           clamp=SCENE_CLAMP, name="offroad")
    return data, [collision, offroad], geom

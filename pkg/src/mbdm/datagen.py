"""Synthetic datasets that lie entirely inside their constraint sets."""

from __future__ import annotations

import math

import numpy as np

from mbdm.constraints.checkerboard import Checkerboard
from mbdm.constraints.polytope import OrthonormalPolytope
from mbdm.constraints.scene import (
    AGENT_DIM,
    CollisionField,
    DrivableRegion,
    SceneGeometry,
    rectangle_corners,
)
from mbdm.errors import ConfigError, GenerationError


def gen_checkerboard_triangles(n: int, seed: int = 0, board: Checkerboard | None = None) -> np.ndarray:
    """Uniform points on the lower-left triangle (below the anti-diagonal) of each valid cell.

    Cells are chosen uniformly, so each triangle carries equal mass.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    board = board or Checkerboard()
    rng = np.random.default_rng(seed)
    cells = board.valid_cells()
    pick = cells[rng.integers(0, len(cells), size=n)]
    u = rng.random((n, 2))
    # fold the unit square onto the triangle u + v <= 1
    flip = u.sum(axis=1) > 1
    u[flip] = 1.0 - u[flip]
    return (pick + u) * board.cell


def gen_polytope_data(n: int, d: int, m: int, seed: int = 0, lower: float = -0.9, upper: float = 0.9):
    """Gaussian points moved along each constraint normal into its slab.

    Returns ``(data, polytope)``.  A point whose coordinate ``a_i.x`` falls
    outside ``[lower, upper]`` is shifted along ``a_i`` so that the new
    coordinate is uniform on the slab; orthogonality keeps the other
    coordinates untouched.
    """
    if n < 1 or m < 1 or d < 1:
        raise ConfigError("n, d and m must be positive")
    if m > d:
        raise ConfigError(f"cannot place {m} orthonormal constraints in dimension {d}")
    if not lower < upper:
        raise ConfigError("infeasible bounds: need lower < upper")
    rng = np.random.default_rng(seed)
    poly = OrthonormalPolytope.random(d, m, lower, upper, rng=rng)
    x = rng.standard_normal((n, d))
    z = x @ poly.normals.T
    target = rng.uniform(lower, upper, size=z.shape)
    outside = (z < lower) | (z > upper)
    shift = np.where(outside, target - z, 0.0)
    x = x + shift @ poly.normals
    # guard the slab ends against round-off
    z = x @ poly.normals.T
    fix = np.clip(z, lower, upper) - z
    x = x + fix @ poly.normals
    if not poly.member(x).all():
        raise GenerationError("polytope data left the constraint set")
    return x, poly


def toy_map(seed: int = 0) -> DrivableRegion:
    """Two or three straight lane rectangles through the origin at random angles.

    Units are about 5 m, which keeps scene coordinates near unit scale.
    """
    rng = np.random.default_rng([seed, 7])
    n_lanes = int(rng.integers(2, 4))
    base = rng.uniform(0, math.pi)
    polys = []
    for k in range(n_lanes):
        ang = base + k * math.pi / n_lanes + rng.uniform(-0.15, 0.15)
        u = np.array([math.cos(ang), math.sin(ang)])
        v = np.array([-u[1], u[0]])
        half_len, half_w = 2.4, rng.uniform(0.36, 0.52)
        off = rng.uniform(-0.2, 0.2) * v
        polys.append(np.array([off + half_len * u - half_w * v, off + half_len * u + half_w * v,
                               off - half_len * u + half_w * v, off - half_len * u - half_w * v]))
    return DrivableRegion(polys)


# fixed log-normal agent sizes (4.5 m by 1.9 m) and speeds, in map units
LOG_LENGTH = (math.log(0.9), 0.1)
LOG_WIDTH = (math.log(0.38), 0.08)
SPEED = (1.6, 0.4)


def gen_toy_scenes(n_scenes: int, n_agents: int, seed: int = 0, drivable: DrivableRegion | None = None,
                   max_tries: int = 2048):
    """Scenes of ``n_agents`` non-overlapping vehicles lying fully on the road.

    Vehicles are placed near a lane centerline with a heading along the lane
    axis (either direction) plus small noise.  Candidates are proposed in
    batches and the first one that fits is kept.  Returns
    ``(data, SceneGeometry)``.
    """
    if not 1 <= n_agents <= 8:
        raise ConfigError("agents per scene must lie in [1, 8]")
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    drivable = drivable or toy_map(seed)
    geom = SceneGeometry(n_agents, drivable)
    pair = CollisionField(2)
    rng = np.random.default_rng(seed)
    lanes = []
    for poly in drivable.polygons:
        e0, e1 = poly[1] - poly[0], poly[2] - poly[1]
        long_edge, short_edge = (e1, e0) if np.linalg.norm(e1) > np.linalg.norm(e0) else (e0, e1)
        lanes.append((poly.mean(axis=0), long_edge / 2, short_edge / 2))
    batch = 8
    out = np.empty((n_scenes, n_agents, AGENT_DIM))
    for k in range(n_agents):
        pending = np.arange(n_scenes)
        for _ in range(0, max_tries, batch):
            cand = _propose(rng, lanes, len(pending) * batch).reshape(len(pending), batch, AGENT_DIM)
            ok = _fully_on_road(cand.reshape(-1, AGENT_DIM), drivable).reshape(len(pending), batch)
            for j in range(k):
                other = np.broadcast_to(out[pending, j][:, None, :], cand.shape)
                both = np.concatenate([cand, other], axis=2).reshape(-1, 2 * AGENT_DIM)
                ok &= pair.member(both).reshape(len(pending), batch)
            hit = ok.any(axis=1)
            out[pending[hit], k] = cand[hit, np.argmax(ok[hit], axis=1)]
            pending = pending[~hit]
            if not len(pending):
                break
        else:
            raise GenerationError(f"could not place {n_agents} agents in scene {int(pending[0])} after "
                                  f"{max_tries} tries; use fewer agents")
    out = out.reshape(n_scenes, -1)
    return out, geom


def _propose(rng, lanes, k):
    lane = rng.integers(len(lanes), size=k)
    c = np.array([lanes[i][0] for i in lane])
    half_long = np.array([lanes[i][1] for i in lane])
    half_short = np.array([lanes[i][2] for i in lane])
    pos = c + rng.uniform(-0.85, 0.85, (k, 1)) * half_long + rng.uniform(-0.5, 0.5, (k, 1)) * half_short
    heading = np.arctan2(half_long[:, 1], half_long[:, 0]) + np.where(rng.random(k) < 0.5, math.pi, 0.0)
    heading = heading + rng.normal(0, 0.05, k)
    length = np.exp(rng.normal(*LOG_LENGTH, size=k))
    width = np.exp(rng.normal(*LOG_WIDTH, size=k))
    speed = rng.normal(*SPEED, size=k)
    return np.stack([pos[:, 0], pos[:, 1], np.log(length), np.log(width), np.cos(heading), np.sin(heading), speed],
                    axis=1)


def _fully_on_road(agents, drivable: DrivableRegion) -> np.ndarray:
    corners = rectangle_corners(agents, 1).corners[:, 0]
    # all four corners inside one lane polygon
    ok = np.zeros(len(agents), dtype=bool)
    for poly in drivable.polygons:
        sub = DrivableRegion([poly])
        _, _, inside = sub.distance(corners.reshape(-1, 2))
        ok |= inside.reshape(-1, 4).all(axis=1)
    return ok

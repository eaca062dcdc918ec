"""Toy traffic scenes: oriented-rectangle agents and a drivable region.

A scene with ``N`` agents is a flat vector of ``7 N`` numbers, per agent
``[cx, cy, log_length, log_width, cos_heading, sin_heading, speed]``.  The
heading pair is normalized on decode, so any non-zero vector is a valid
encoding; sizes live in log space so they stay positive under noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mbdm.constraints.base import DistanceField, as_batch
from mbdm.errors import ConfigError

AGENT_DIM = 7
FEATURES = ("cx", "cy", "log_length", "log_width", "cos_h", "sin_h", "speed")
MIN_EXTENT = 1e-6

# corner k = center + alpha_k * (L/2) u + beta_k * (W/2) perp(u), counter-clockwise
_ALPHA = np.array([1.0, 1.0, -1.0, -1.0])
_BETA = np.array([-1.0, 1.0, 1.0, -1.0])


def encode_agents(cx, cy, length, width, heading, speed) -> np.ndarray:
    """Encode per-agent arrays (each shape ``(N,)``) into one scene vector."""
    cx, cy, length, width, heading, speed = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (cx, cy, length, width, heading, speed)))
    if np.any(length <= 0) or np.any(width <= 0):
        raise ConfigError("agent length and width must be positive")
    agents = np.stack([cx, cy, np.log(length), np.log(width), np.cos(heading), np.sin(heading), speed], axis=-1)
    return agents.reshape(*agents.shape[:-2], -1)


def decode_agents(x) -> dict[str, np.ndarray]:
    """Inverse of :func:`encode_agents` for ``(..., 7 N)`` arrays."""
    x = np.asarray(x, dtype=np.float64)
    a = x.reshape(*x.shape[:-1], -1, AGENT_DIM)
    return {
        "cx": a[..., 0], "cy": a[..., 1],
        "length": np.exp(a[..., 2]), "width": np.exp(a[..., 3]),
        "heading": np.arctan2(a[..., 5], a[..., 4]), "speed": a[..., 6],
    }


@dataclass
class CornerFrame:
    corners: np.ndarray      # (B, N, 4, 2)
    jacobian: np.ndarray     # (B, N, 4, 2, 7): d corner / d agent features
    n_degenerate: int


def rectangle_corners(x: np.ndarray, n_agents: int) -> CornerFrame:
    """Corners of every agent rectangle and their derivatives.

    Sizes below ``MIN_EXTENT`` and heading vectors shorter than ``MIN_EXTENT``
    are clamped (their derivative is then zero) and counted.
    """
    a = x.reshape(len(x), n_agents, AGENT_DIM)
    e_l, e_w = np.exp(a[..., 2]), np.exp(a[..., 3])
    small_l, small_w = e_l < MIN_EXTENT, e_w < MIN_EXTENT
    half_l = 0.5 * np.where(small_l, MIN_EXTENT, e_l)
    half_w = 0.5 * np.where(small_w, MIN_EXTENT, e_w)
    hc, hs = a[..., 4], a[..., 5]
    r = np.hypot(hc, hs)
    flat = r < MIN_EXTENT
    safe_r = np.where(flat, 1.0, r)
    ux = np.where(flat, np.where(r > 0, hc / np.where(r > 0, r, 1.0), 1.0), hc / safe_r)
    uy = np.where(flat, np.where(r > 0, hs / np.where(r > 0, r, 1.0), 0.0), hs / safe_r)
    n_degenerate = int(small_l.sum() + small_w.sum() + flat.sum())

    al = _ALPHA * half_l[..., None]  # (B, N, 4)
    bw = _BETA * half_w[..., None]
    ux4, uy4 = ux[..., None], uy[..., None]
    corners = np.empty(a.shape[:2] + (4, 2))
    corners[..., 0] = a[..., 0, None] + al * ux4 - bw * uy4
    corners[..., 1] = a[..., 1, None] + al * uy4 + bw * ux4

    jac = np.zeros(a.shape[:2] + (4, 2, AGENT_DIM))
    jac[..., 0, 0] = 1.0
    jac[..., 1, 1] = 1.0
    keep_l = (~small_l)[..., None]
    keep_w = (~small_w)[..., None]
    jac[..., 0, 2] = np.where(keep_l, al * ux4, 0.0)
    jac[..., 1, 2] = np.where(keep_l, al * uy4, 0.0)
    jac[..., 0, 3] = np.where(keep_w, -bw * uy4, 0.0)
    jac[..., 1, 3] = np.where(keep_w, bw * ux4, 0.0)
    # du/d(hc, hs) = (I - u u^T) / r
    inv_r = np.where(flat, 0.0, 1.0 / safe_r)[..., None]
    dux_dc, duy_dc = (1 - ux4 * ux4) * inv_r, (-ux4 * uy4) * inv_r
    dux_ds, duy_ds = (-ux4 * uy4) * inv_r, (1 - uy4 * uy4) * inv_r
    jac[..., 0, 4] = al * dux_dc - bw * duy_dc
    jac[..., 1, 4] = al * duy_dc + bw * dux_dc
    jac[..., 0, 5] = al * dux_ds - bw * duy_ds
    jac[..., 1, 5] = al * duy_ds + bw * dux_ds
    return CornerFrame(corners, jac, n_degenerate)


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def clip_convex(subject: np.ndarray, clipper: np.ndarray):
    """Sutherland-Hodgman clip of convex quads ``subject`` by convex quads ``clipper``.

    Both are ``(M, 4, 2)`` counter-clockwise.  Returns ``(vertices, count)``
    with vertices ``(M, 8, 2)``; only the first ``count[m]`` rows are used.
    """
    m = len(subject)
    cap = 8
    poly = np.zeros((m, cap, 2))
    poly[:, :4] = subject
    count = np.full(m, 4)
    slots = np.arange(cap)
    for e in range(4):
        rx, ry = clipper[:, e, 0:1], clipper[:, e, 1:2]
        ex = clipper[:, (e + 1) % 4, 0:1] - rx
        ey = clipper[:, (e + 1) % 4, 1:2] - ry
        f = _cross(ex, ey, poly[..., 0] - rx, poly[..., 1] - ry)
        live = slots < count[:, None]
        nxt = (slots[None, :] + 1) % np.maximum(count, 1)[:, None]
        f_next = np.take_along_axis(f, nxt, axis=1)
        v_next = np.take_along_axis(poly, nxt[..., None], axis=1)
        inside, inside_next = f >= 0, f_next >= 0
        crosses = live & (inside != inside_next)
        denom = np.where(crosses, f - f_next, 1.0)
        t = np.where(crosses, f / denom, 0.0)
        hit = poly + t[..., None] * (v_next - poly)
        cand = np.stack([poly, hit], axis=2).reshape(m, 2 * cap, 2)
        valid = np.stack([live & inside, crosses], axis=2).reshape(m, 2 * cap)
        order = np.argsort(~valid, axis=1, kind="stable")[:, :cap]
        poly = np.take_along_axis(cand, order[..., None], axis=1)
        count = np.minimum(valid.sum(axis=1), cap)
    return poly, count


def polygon_area(vertices: np.ndarray, count: np.ndarray) -> np.ndarray:
    """Shoelace area of padded polygons as returned by :func:`clip_convex`."""
    cap = vertices.shape[1]
    slots = np.arange(cap)
    nxt = (slots[None, :] + 1) % np.maximum(count, 1)[:, None]
    vn = np.take_along_axis(vertices, nxt[..., None], axis=1)
    terms = _cross(vertices[..., 0], vertices[..., 1], vn[..., 0], vn[..., 1])
    terms = np.where(slots < count[:, None], terms, 0.0)
    return 0.5 * terms.sum(axis=1)


def edge_inside_intervals(subject: np.ndarray, clipper: np.ndarray):
    """Parameter range ``[u0, u1]`` of each subject edge lying inside ``clipper``.

    Edge ``k`` runs from vertex ``k`` to vertex ``k+1``.  Empty ranges come
    back as ``u0 == u1 == 0``.  Shapes: ``(M, 4, 2)`` in, ``(M, 4)`` out.
    """
    p = subject[:, :, None, :]                       # (M, k, 1, 2)
    q = np.roll(subject, -1, axis=1)[:, :, None, :]
    r = clipper[:, None, :, :]                       # (M, 1, e, 2)
    s = np.roll(clipper, -1, axis=1)[:, None, :, :]
    ex, ey = s[..., 0] - r[..., 0], s[..., 1] - r[..., 1]
    n0 = _cross(ex, ey, p[..., 0] - r[..., 0], p[..., 1] - r[..., 1])
    n1 = _cross(ex, ey, q[..., 0] - p[..., 0], q[..., 1] - p[..., 1])
    safe = np.where(n1 == 0, 1.0, n1)
    bound = -n0 / safe
    lower = np.where(n1 > 0, bound, -np.inf).max(axis=2)
    upper = np.where(n1 < 0, bound, np.inf).min(axis=2)
    outside = ((n1 == 0) & (n0 < 0)).any(axis=2)
    u0 = np.maximum(lower, 0.0)
    u1 = np.minimum(upper, 1.0)
    empty = outside | (u1 <= u0)
    return np.where(empty, 0.0, u0), np.where(empty, 0.0, u1)


def _boundary_transport(subject, clipper):
    """d area(subject & clipper) / d subject vertices, shape ``(M, 4, 2)``.

    Moving a vertex sweeps the parts of its two edges that lie inside the
    clipper; each edge point moves by the linear blend of its endpoints'
    displacements, weighted against the outward edge normal.
    """
    u0, u1 = edge_inside_intervals(subject, clipper)
    d = np.roll(subject, -1, axis=1) - subject
    normal = np.stack([d[..., 1], -d[..., 0]], axis=-1)  # outward, scaled by edge length
    half_sq = 0.5 * (u1 * u1 - u0 * u0)
    w_start = (u1 - u0) - half_sq
    g = normal * w_start[..., None]
    g += np.roll(normal * half_sq[..., None], 1, axis=1)
    return g


def _vertex_segment_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest distance from a vertex of ``a`` to an edge of ``b``, per row."""
    p = a[:, :, None, :]
    s0 = b[:, None, :, :]
    sd = np.roll(b, -1, axis=1)[:, None, :, :] - s0
    t = np.clip(((p - s0) * sd).sum(-1) / np.maximum((sd * sd).sum(-1), 1e-300), 0.0, 1.0)
    q = s0 + t[..., None] * sd
    return np.sqrt(((p - q) ** 2).sum(-1)).min(axis=(1, 2))


def _sat_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """True where the interiors of convex quads ``a`` and ``b`` intersect."""
    overlap = np.ones(len(a), dtype=bool)
    for poly in (a, b):
        d = np.roll(poly, -1, axis=1) - poly
        axes = np.stack([-d[..., 1], d[..., 0]], axis=-1)   # (M, 4, 2)
        pa = np.einsum("mkc,mvc->mkv", axes, a)
        pb = np.einsum("mkc,mvc->mkv", axes, b)
        sep = (pa.max(-1) <= pb.min(-1)) | (pb.max(-1) <= pa.min(-1))
        overlap &= ~sep.any(axis=1)
    return overlap


class CollisionField(DistanceField):
    """Sum over agent pairs of the overlap area of their rectangles."""

    name = "collision"

    def __init__(self, n_agents: int):
        if n_agents < 1:
            raise ConfigError("a scene needs at least one agent")
        self.n_agents = n_agents
        self.dim = AGENT_DIM * n_agents
        self.pairs = np.array(np.triu_indices(n_agents, 1)).T
        self.degenerate_count = 0

    def _pair_corners(self, x):
        frame = rectangle_corners(x, self.n_agents)
        self.degenerate_count += frame.n_degenerate
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        b = len(x)
        a_c = frame.corners[:, i].reshape(-1, 4, 2)
        b_c = frame.corners[:, j].reshape(-1, 4, 2)
        return frame, a_c, b_c, b

    def pair_areas(self, x) -> np.ndarray:
        """Overlap area of every pair, shape ``(B, n_pairs)``."""
        xb, _ = as_batch(x, self.dim)
        if not len(self.pairs):
            return np.zeros((len(xb), 0))
        _, a_c, b_c, b = self._pair_corners(xb)
        verts, count = clip_convex(a_c, b_c)
        return polygon_area(verts, count).reshape(b, -1)

    def _value_and_grad(self, x, sigma):
        n = len(x)
        if not len(self.pairs):
            return np.zeros(n), np.zeros_like(x)
        frame, a_c, b_c, _ = self._pair_corners(x)
        verts, count = clip_convex(a_c, b_c)
        area = np.maximum(polygon_area(verts, count), 0.0).reshape(n, -1)
        n_pairs = len(self.pairs)
        ga = _boundary_transport(a_c, b_c).reshape(n, n_pairs, 4, 2)
        gb = _boundary_transport(b_c, a_c).reshape(n, n_pairs, 4, 2)
        # no overlap: keep the gradient exactly zero
        live = (area > 0)[..., None, None]
        ga, gb = np.where(live, ga, 0.0), np.where(live, gb, 0.0)
        g_corner = np.zeros_like(frame.corners)
        for p, (i, j) in enumerate(self.pairs):
            g_corner[:, i] += ga[:, p]
            g_corner[:, j] += gb[:, p]
        g = np.einsum("bnkc,bnkcf->bnf", g_corner, frame.jacobian).reshape(n, -1)
        return area.sum(axis=1), g

    def _member(self, x):
        if not len(self.pairs):
            return np.ones(len(x), dtype=bool)
        _, a_c, b_c, b = self._pair_corners(x)
        return ~_sat_overlap(a_c, b_c).reshape(b, -1).any(axis=1)

    def tie_gap(self, x, sigma=0.0):
        """Distance of any rectangle vertex to another rectangle's boundary."""
        xb, _ = as_batch(x, self.dim)
        if not len(self.pairs):
            return np.full(len(xb), np.inf)
        _, a_c, b_c, b = self._pair_corners(xb)
        gap = np.minimum(_vertex_segment_gap(a_c, b_c), _vertex_segment_gap(b_c, a_c))
        return gap.reshape(b, -1).min(axis=1)


class DrivableRegion:
    """Union of closed convex polygons.

    Vertices may be given in either orientation; they are stored
    counter-clockwise.  Non-convex or degenerate polygons are rejected.
    """

    def __init__(self, polygons):
        polys = []
        for raw in polygons:
            v = np.asarray(raw, dtype=np.float64)
            if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
                raise ConfigError("each drivable polygon needs at least 3 two-dimensional vertices")
            d = np.roll(v, -1, axis=0) - v
            turn = _cross(d[:, 0], d[:, 1], np.roll(d, -1, axis=0)[:, 0], np.roll(d, -1, axis=0)[:, 1])
            if np.all(turn <= 0):
                v, turn = v[::-1].copy(), -turn[::-1]
            if not np.all(turn > 0):
                raise ConfigError("drivable polygons must be strictly convex")
            polys.append(v)
        if not polys:
            raise ConfigError("drivable region is empty")
        self.polygons = polys

    def distance(self, p: np.ndarray):
        """Squared distance to the union, nearest point and inside flag for points ``(M, 2)``.

        Ties go to the lowest polygon index, then the lowest edge index.
        """
        best = np.full(len(p), np.inf)
        near = p.copy()
        inside = np.zeros(len(p), dtype=bool)
        for v in self.polygons:
            a = v[None, :, :]
            ab = np.roll(v, -1, axis=0)[None, :, :] - a
            ap = p[:, None, :] - a
            ins = (_cross(ab[..., 0], ab[..., 1], ap[..., 0], ap[..., 1]) >= 0).all(axis=1)
            t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
            q = a + t[..., None] * ab
            d2 = ((p[:, None, :] - q) ** 2).sum(-1)
            k = np.argmin(d2, axis=1)
            rows = np.arange(len(p))
            d2k = np.where(ins, 0.0, d2[rows, k])
            qk = np.where(ins[:, None], p, q[rows, k])
            better = d2k < best
            best = np.where(better, d2k, best)
            near = np.where(better[:, None], qk, near)
            inside |= ins
        return best, near, inside

    def boundary_gap(self, p: np.ndarray):
        """Per point: distance to the nearest polygon boundary and the gap between
        the two nearest polygons (``inf`` with a single polygon)."""
        per_poly = []
        edge = np.full(len(p), np.inf)
        for v in self.polygons:
            a = v[None, :, :]
            ab = np.roll(v, -1, axis=0)[None, :, :] - a
            ap = p[:, None, :] - a
            ins = (_cross(ab[..., 0], ab[..., 1], ap[..., 0], ap[..., 1]) >= 0).all(axis=1)
            t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
            d = np.sqrt(((ap - t[..., None] * ab) ** 2).sum(-1)).min(axis=1)
            edge = np.minimum(edge, d)
            per_poly.append(np.where(ins, 0.0, d))
        dist = np.sort(np.stack(per_poly, axis=1), axis=1)
        tie = dist[:, 1] - dist[:, 0] if dist.shape[1] > 1 else np.full(len(p), np.inf)
        return edge, np.where(dist[:, 0] > 0, tie, np.inf)


class OffroadField(DistanceField):
    """Per agent, the smallest squared corner distance to the drivable region, summed."""

    name = "offroad"

    def __init__(self, n_agents: int, drivable: DrivableRegion):
        if n_agents < 1:
            raise ConfigError("a scene needs at least one agent")
        if not isinstance(drivable, DrivableRegion):
            drivable = DrivableRegion(drivable)
        self.n_agents = n_agents
        self.drivable = drivable
        self.dim = AGENT_DIM * n_agents
        self.degenerate_count = 0

    def _corner_distances(self, x):
        frame = rectangle_corners(x, self.n_agents)
        self.degenerate_count += frame.n_degenerate
        pts = frame.corners.reshape(-1, 2)
        d2, near, inside = self.drivable.distance(pts)
        shape = frame.corners.shape[:3]
        return frame, d2.reshape(shape), near.reshape(shape + (2,)), inside.reshape(shape)

    def agent_values(self, x) -> np.ndarray:
        xb, _ = as_batch(x, self.dim)
        _, d2, _, _ = self._corner_distances(xb)
        return d2.min(axis=2)

    def _value_and_grad(self, x, sigma):
        frame, d2, near, _ = self._corner_distances(x)
        k = np.argmin(d2, axis=2)[..., None]                     # (B, N, 1)
        val = np.take_along_axis(d2, k, axis=2)[..., 0]
        p = np.take_along_axis(frame.corners, k[..., None], axis=2)[:, :, 0]
        q = np.take_along_axis(near, k[..., None], axis=2)[:, :, 0]
        jac = np.take_along_axis(frame.jacobian, k[..., None, None], axis=2)[:, :, 0]
        g = np.einsum("bnc,bncf->bnf", 2.0 * (p - q), jac)
        return val.sum(axis=1), g.reshape(len(x), -1)

    def _member(self, x):
        _, _, _, inside = self._corner_distances(x)
        return inside.any(axis=2).all(axis=1)

    def tie_gap(self, x, sigma=0.0):
        """Distance from the sets where the nearest corner, nearest polygon or
        inside/outside status of a corner changes."""
        xb, _ = as_batch(x, self.dim)
        frame = rectangle_corners(xb, self.n_agents)
        pts = frame.corners.reshape(-1, 2)
        d2, _, _ = self.drivable.distance(pts)
        edge, poly_tie = self.drivable.boundary_gap(pts)
        shape = frame.corners.shape[:3]
        d = np.sqrt(d2).reshape(shape)
        srt = np.sort(d, axis=2)
        corner_tie = np.where(srt[..., 0] > 0, srt[..., 1] - srt[..., 0], np.inf)
        best = np.argmin(d, axis=2)[..., None]
        edge_b = np.take_along_axis(edge.reshape(shape), best, axis=2)[..., 0]
        poly_b = np.take_along_axis(poly_tie.reshape(shape), best, axis=2)[..., 0]
        # an inside corner only matters while it is the agent's only inside corner
        n_in = (d == 0).sum(axis=2)
        edge_b = np.where(n_in > 1, np.inf, edge_b)
        return np.minimum.reduce([corner_tie, edge_b, poly_b]).min(axis=1)


@dataclass
class SceneGeometry:
    """Layout of a scene vector together with its drivable region."""

    n_agents: int
    drivable: DrivableRegion

    @property
    def dim(self) -> int:
        return AGENT_DIM * self.n_agents

    def collision(self) -> CollisionField:
        return CollisionField(self.n_agents)

    def offroad(self) -> OffroadField:
        return OffroadField(self.n_agents, self.drivable)

    def decode(self, x):
        return decode_agents(x)

"""CSV tables, dataset construction from a run config and the pixmap writer."""

from __future__ import annotations

import csv
import re

import numpy as np

from mbdm.config import RunConfig
from mbdm.datagen import gen_checkerboard_triangles, gen_polytope_data, gen_toy_scenes
from mbdm.errors import ConfigError

_COORD = re.compile(r"x(\d+)$")


def fmt(v: float) -> str:
    # shortest round-tripping repr keeps files exact and deterministic
    return repr(float(v))


def write_table(path, x: np.ndarray, extra: dict[str, np.ndarray] | None = None):
    """Write coordinates as ``x0..x{d-1}`` followed by integer ``extra`` columns."""
    x = np.asarray(x, dtype=np.float64)
    extra = extra or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(x.shape[1])] + list(extra))
        cols = [np.asarray(v).astype(np.int64) for v in extra.values()]
        for i, row in enumerate(x):
            w.writerow([fmt(v) for v in row] + [int(c[i]) for c in cols])


def read_table(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Read a CSV written by :func:`write_table`: ``(coordinates, other columns)``."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise ConfigError(f"{path}: empty file (expected a header)")
    header = [h.strip() for h in rows[0]]
    coords = [(int(m.group(1)), i) for i, h in enumerate(header) if (m := _COORD.match(h))]
    coords.sort()
    if not coords or [c for c, _ in coords] != list(range(len(coords))):
        raise ConfigError(f"{path}: header must name coordinate columns x0, x1, ...")
    body = [r for r in rows[1:] if r]
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed row ({exc})") from None
    x = arr[:, [i for _, i in coords]]
    other = {h: arr[:, i] for i, h in enumerate(header) if not _COORD.match(h)}
    return x, other


def build_dataset(cfg: RunConfig) -> tuple[np.ndarray, dict]:
    """Generate (or load) the dataset named by ``[data]``.

    Returns ``(data, extras)`` where ``extras`` holds the geometry a bridge
    may take from the generator.
    """
    d = cfg.data
    gen = d["generator"]
    if gen == "checkerboard":
        return gen_checkerboard_triangles(d["n"], d["seed"]), {}
    if gen == "polytope":
        x, poly = gen_polytope_data(d["n"], d["dim"], d["constraints"], d["seed"], d["lower"], d["upper"])
        return x, {"normals": poly.normals, "lower": poly.lower, "upper": poly.upper}
    if gen == "scenes":
        x, geom = gen_toy_scenes(d["n"], d["agents"], d["seed"])
        return x, {"agents": geom.n_agents, "polygons": geom.drivable.polygons}
    x, _ = read_table(d["path"])
    if len(x) == 0:
        raise ConfigError(f"[data] path: {d['path']} holds no rows")
    return x, {}


def write_ppm(path, image: np.ndarray, caption: str = ""):
    """Binary portable pixmap (P6) from an ``(H, W, 3)`` uint8 array; ``caption`` becomes a comment line."""
    h, w, _ = image.shape
    head = "P6\n"
    if caption:
        head += "# " + caption.replace("\n", " ") + "\n"
    head += f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> tuple[np.ndarray, str]:
    """Inverse of :func:`write_ppm`: ``(image, caption)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        line_end = blob.index(b"\n", pos)
        line = blob[pos:line_end].decode("ascii")
        pos = line_end + 1
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            tokens += line.split()
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ConfigError(f"{path}: not an 8-bit P6 pixmap")
    w, h = int(tokens[1]), int(tokens[2])
    img = np.frombuffer(blob[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return img, " ".join(comments)

"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    "MBDM"                      magic
    u32                         format version
    u16 + bytes                 architecture tag (ascii)
    5 x u32                     dim, hidden, blocks, embed_dim, cond_dim
    f64                         data scale used for input preconditioning
    u32                         number of layers, then per layer:
                                  u16 + bytes name, u8 ndim, ndim x u32 shape
    f64[...]                    parameters, layer by layer, C order
    u8                          1 if Adam moments follow
      u64 step, 4 x f64 (lr, beta1, beta2, eps), f64[...] m, f64[...] v
    u32 + bytes                 RNG state (canonical JSON)
    u64                         iteration
    32 bytes                    config hash (SHA-256)
    u32 + bytes                 resolved config text (utf-8)

Encoding is canonical, so ``save(load(blob)) == blob``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from mbdm.errors import ConfigError
from mbdm.nn.adam import AdamState
from mbdm.nn.mlp import MlpParams

MAGIC = b"MBDM"
VERSION = 1


@dataclass
class Checkpoint:
    arch: str
    params: MlpParams
    sigma_data: float
    rng_state: dict
    iteration: int
    config_hash: bytes
    config_text: str
    adam: AdamState | None = None

    def generator(self) -> np.random.Generator:
        name = self.rng_state.get("bit_generator")
        if not hasattr(np.random, str(name)):
            raise ConfigError(f"checkpoint names unknown bit generator {name!r}")
        bg = getattr(np.random, name)()
        bg.state = self.rng_state
        return np.random.Generator(bg)


def _str(s: str, width: str = "<H") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def _payload(arrays: dict[str, np.ndarray], shapes) -> bytes:
    return b"".join(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes() for name, _ in shapes)


def encode(ck: Checkpoint) -> bytes:
    p = ck.params
    p.validate()
    shapes = p.layer_shapes()
    out = [MAGIC, struct.pack("<I", VERSION), _str(ck.arch),
           struct.pack("<5I", p.dim, p.hidden, p.blocks, p.embed_dim, p.cond_dim),
           struct.pack("<d", ck.sigma_data), struct.pack("<I", len(shapes))]
    for name, shape in shapes:
        out += [_str(name), struct.pack("<B", len(shape)), struct.pack(f"<{len(shape)}I", *shape)]
    out.append(_payload(p.arrays, shapes))
    if ck.adam is None:
        out.append(struct.pack("<B", 0))
    else:
        a = ck.adam
        out += [struct.pack("<B", 1), struct.pack("<Q4d", a.step, a.lr, a.beta1, a.beta2, a.eps),
                _payload(a.m, shapes), _payload(a.v, shapes)]
    out.append(_str(json.dumps(ck.rng_state, sort_keys=True, separators=(",", ":")), "<I"))
    if len(ck.config_hash) != 32:
        raise ConfigError("config hash must be 32 bytes")
    out += [struct.pack("<Q", ck.iteration), ck.config_hash, _str(ck.config_text, "<I")]
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ConfigError("checkpoint is truncated")
        b = self.blob[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def string(self, width: str = "<H") -> str:
        return self.take(self.unpack(width)).decode("utf-8")

    def arrays(self, shapes) -> dict[str, np.ndarray]:
        out = {}
        for name, shape in shapes:
            n = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        return out


def decode(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    version = r.unpack("<I")
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    arch = r.string()
    dim, hidden, blocks, embed_dim, cond_dim = r.unpack("<5I")
    sigma_data = r.unpack("<d")
    params = MlpParams(dim, hidden, blocks, embed_dim, cond_dim)
    table = []
    for _ in range(r.unpack("<I")):
        name = r.string()
        ndim = r.unpack("<B")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim)))
        table.append((name, shape))
    if table != params.layer_shapes():
        raise ConfigError("checkpoint layer table does not match its header")
    params.arrays = r.arrays(table)
    adam = None
    if r.unpack("<B"):
        step, lr, b1, b2, eps = r.unpack("<Q4d")
        adam = AdamState(lr, b1, b2, eps, step, r.arrays(table), r.arrays(table))
    rng_state = json.loads(r.string("<I"))
    iteration = r.unpack("<Q")
    config_hash = r.take(32)
    config_text = r.string("<I")
    if r.pos != len(blob):
        raise ConfigError("trailing bytes after checkpoint")
    return Checkpoint(arch, params, sigma_data, rng_state, iteration, config_hash, config_text, adam)


def save_checkpoint(path, ck: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(encode(ck))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode(blob)

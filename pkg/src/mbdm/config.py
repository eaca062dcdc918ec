"""Run configuration: a flat ``key = value`` file with bracketed sections.

Sections are ``[data]``, ``[model]``, ``[diffusion]``, any number of
``[bridge.<name>]``, ``[sampler]`` and ``[train]``.  Every key belongs to a
closed vocabulary; unknown keys are errors.  Loading resolves defaults, and
:func:`materialize` replaces the ``data`` / ``auto`` placeholders with values
taken from the generated dataset, so the resolved text written next to every
output fully determines the run.

Value syntax: vectors are whitespace separated numbers, matrices use ``;``
between rows, polygon lists use ``;`` between vertices and ``|`` between
polygons (``0 0; 1 0; 1 1 | 2 2; 3 2; 3 3``).
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from mbdm.bridges import ARCHITECTURES, Bridge, GammaSchedule, IntervalBridge, ManualBridge
from mbdm.constraints.base import NormalizedField
from mbdm.constraints.checkerboard import Checkerboard
from mbdm.constraints.polytope import OrthonormalPolytope
from mbdm.constraints.scene import CollisionField, DrivableRegion, OffroadField
from mbdm.diffusion import SIGMA_MAX, SIGMA_MIN, NoiseSchedule, TrainConfig, estimate_sigma_data
from mbdm.errors import ConfigError
from mbdm.sampler import SOLVERS, SamplerConfig

REQUIRED = object()
PLACEHOLDER = "data"
AUTO = "auto"

# keys that may change between a run and its resumption
VOLATILE = {("train", "iterations"), ("train", "log_every"), ("train", "checkpoint_every")}


def _fmt_float(v) -> str:
    return repr(float(v))


def _fmt_vector(v) -> str:
    return " ".join(_fmt_float(a) for a in np.atleast_1d(v))


def _fmt_matrix(m) -> str:
    return "; ".join(_fmt_vector(row) for row in np.atleast_2d(m))


def _fmt_polygons(polys) -> str:
    return " | ".join(_fmt_matrix(p) for p in polys)


class Kind:
    """Parser and canonical formatter for one value type."""

    def __init__(self, parse, fmt=str, placeholders=()):
        self.parse_fn, self.fmt = parse, fmt
        self.placeholders = placeholders

    def parse(self, key, raw):
        raw = raw.strip()
        if raw in self.placeholders:
            return raw
        try:
            return self.parse_fn(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None

    def format(self, value) -> str:
        if isinstance(value, str) and value in self.placeholders:
            return value
        return self.fmt(value)


def _parse_bool(raw):
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true or false")


def _parse_vector(raw):
    v = np.array([float(t) for t in raw.replace(",", " ").split()])
    if v.size == 0:
        raise ValueError("empty vector")
    return v


def _parse_matrix(raw):
    rows = [_parse_vector(r) for r in raw.split(";") if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows must be non-empty and of equal length")
    return np.array(rows)


def _parse_polygons(raw):
    return [_parse_matrix(p) for p in raw.split("|") if p.strip()]


def _choice(*options):
    def parse(raw):
        if raw not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return raw
    return parse


def _optional_float(raw):
    return None if raw.lower() == "none" else float(raw)


INT = Kind(int)
FLOAT = Kind(float, _fmt_float)
BOOL = Kind(_parse_bool, lambda v: "true" if v else "false")
STR = Kind(str)
VECTOR = Kind(_parse_vector, _fmt_vector, (PLACEHOLDER,))
MATRIX = Kind(_parse_matrix, _fmt_matrix, (PLACEHOLDER,))
POLYGONS = Kind(_parse_polygons, _fmt_polygons, (PLACEHOLDER,))
AGENTS = Kind(int, str, (PLACEHOLDER,))
SIGMA_DATA = Kind(float, _fmt_float, (AUTO,))
CLAMP = Kind(_optional_float, lambda v: "none" if v is None else _fmt_float(v))

GENERATORS = ("checkerboard", "polytope", "scenes", "csv")
FIELDS = ("checkerboard", "polytope", "interval", "collision", "offroad")

DATA_KEYS = {
    "checkerboard": {"n": (INT, 1000), "seed": (INT, 0)},
    "polytope": {"n": (INT, 2000), "seed": (INT, 0), "dim": (INT, 16), "constraints": (INT, 4),
                 "lower": (FLOAT, -0.9), "upper": (FLOAT, 0.9)},
    "scenes": {"n": (INT, 2000), "seed": (INT, 0), "agents": (INT, 4)},
    "csv": {"path": (STR, REQUIRED)},
}

SECTION_KEYS = {
    "model": {"arch": (Kind(_choice(*ARCHITECTURES)), REQUIRED), "hidden": (INT, 256), "blocks": (INT, 2),
              "embed_dim": (INT, 128)},
    "diffusion": {"sigma_min": (FLOAT, SIGMA_MIN), "sigma_max": (FLOAT, SIGMA_MAX)},
    "sampler": {"steps": (INT, 100), "solver": (Kind(_choice(*SOLVERS)), "heun"), "s_churn": (FLOAT, 10.0),
                "seed": (INT, 0)},
    "train": {"iterations": (INT, 20_000), "batch_size": (INT, 1000), "lr": (FLOAT, 3e-4), "seed": (INT, 0),
              "val_fraction": (FLOAT, 0.1), "val_sigmas": (INT, 64), "log_every": (INT, 100),
              "checkpoint_every": (INT, 0)},
}


def _manual(gamma, k, normalize, clamp):
    return {"gamma": (Kind(_choice("inverse", "watermark")), gamma), "k": (FLOAT, k),
            "sigma_data": (SIGMA_DATA, AUTO), "normalize": (BOOL, normalize), "clamp": (CLAMP, clamp)}


BRIDGE_KEYS = {
    "checkerboard": {**_manual("inverse", 1.0, False, None), "cell": (FLOAT, 1.0), "lo": (FLOAT, -2.0),
                     "hi": (FLOAT, 2.0), "parity": (INT, 0)},
    "polytope": {**_manual("watermark", 1.0, False, None), "normals": (MATRIX, PLACEHOLDER),
                 "lower": (VECTOR, PLACEHOLDER), "upper": (VECTOR, PLACEHOLDER)},
    "interval": {"lo": (VECTOR, REQUIRED), "hi": (VECTOR, REQUIRED)},
    "collision": {**_manual("inverse", 10.0, True, 1e3), "agents": (AGENTS, PLACEHOLDER)},
    "offroad": {**_manual("inverse", 100.0, True, 1e3), "agents": (AGENTS, PLACEHOLDER),
                "polygons": (POLYGONS, PLACEHOLDER)},
}


def _resolve_keys(section: str, raw: dict, vocab: dict) -> dict:
    for key in raw:
        if key not in vocab:
            raise ConfigError(f"[{section}] {key}: unknown key (allowed: {', '.join(vocab)})")
    out = {}
    for key, (kind, default) in vocab.items():
        name = f"[{section}] {key}"
        if key in raw:
            out[key] = kind.parse(name, raw[key])
        elif default is REQUIRED:
            raise ConfigError(f"{name}: missing required key")
        else:
            out[key] = default
    return out


@dataclass
class RunConfig:
    """Parsed configuration with defaults filled in.

    ``bridges`` keeps file order and maps the section suffix (used as the
    constraint name) to its resolved keys.
    """

    data: dict
    model: dict
    diffusion: dict
    sampler: dict
    train: dict
    bridges: dict[str, dict] = field(default_factory=dict)

    # ---- vocabulary lookups
    def _data_vocab(self):
        return {"generator": (STR, REQUIRED), **DATA_KEYS[self.data["generator"]]}

    def sections(self):
        yield "data", self.data, self._data_vocab()
        for name in ("model", "diffusion"):
            yield name, getattr(self, name), SECTION_KEYS[name]
        for name, b in self.bridges.items():
            yield f"bridge.{name}", b, {"field": (STR, REQUIRED), **BRIDGE_KEYS[b["field"]]}
        for name in ("sampler", "train"):
            yield name, getattr(self, name), SECTION_KEYS[name]

    def text(self) -> str:
        """Canonical resolved text; parsing it gives back the same config."""
        buf = io.StringIO()
        for name, values, vocab in self.sections():
            buf.write(f"[{name}]\n")
            for key, (kind, _) in vocab.items():
                buf.write(f"{key} = {kind.format(values[key])}\n")
            buf.write("\n")
        return buf.getvalue()

    def hash(self) -> bytes:
        """SHA-256 over everything that affects training except the step budget and logging cadence."""
        buf = io.StringIO()
        for name, values, vocab in self.sections():
            if name == "sampler":
                continue
            buf.write(f"[{name}]\n")
            for key, (kind, _) in vocab.items():
                if (name, key) not in VOLATILE:
                    buf.write(f"{key} = {kind.format(values[key])}\n")
        return hashlib.sha256(buf.getvalue().encode()).digest()

    @property
    def is_materialized(self) -> bool:
        return not any(isinstance(v, str) and v in (PLACEHOLDER, AUTO)
                       for b in self.bridges.values() for k, v in b.items() if k != "field")

    # ---- library objects
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.diffusion["sigma_min"], self.diffusion["sigma_max"])

    def train_config(self) -> TrainConfig:
        t = self.train
        cfg = TrainConfig(iterations=t["iterations"], batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"],
                          arch=self.model["arch"], hidden=self.model["hidden"], blocks=self.model["blocks"],
                          embed_dim=self.model["embed_dim"], val_fraction=t["val_fraction"],
                          val_sigmas=t["val_sigmas"], log_every=t["log_every"],
                          checkpoint_every=t["checkpoint_every"])
        cfg.validate()
        return cfg

    def sampler_config(self, **overrides) -> SamplerConfig:
        s = {**self.sampler, **{k: v for k, v in overrides.items() if v is not None}}
        return SamplerConfig(steps=s["steps"], solver=s["solver"], s_churn=s["s_churn"],
                             sigma_min=self.diffusion["sigma_min"], sigma_max=self.diffusion["sigma_max"],
                             seed=s["seed"])

    def build_bridges(self) -> list[Bridge]:
        if not self.is_materialized:
            raise ConfigError("bridge settings still reference the dataset; materialize the config first")
        return [_build_bridge(name, b) for name, b in self.bridges.items()]


def _gamma(b) -> GammaSchedule:
    return GammaSchedule(b["gamma"], k=b["k"], sigma_data=b["sigma_data"])


def _build_bridge(name: str, b: dict) -> Bridge:
    kind = b["field"]
    if kind == "interval":
        if b["lo"].shape != b["hi"].shape:
            raise ConfigError(f"[bridge.{name}] lo and hi differ in length")
        return IntervalBridge(b["lo"], b["hi"], name=name)
    if kind == "checkerboard":
        f = Checkerboard(b["cell"], b["lo"], b["hi"], b["parity"])
    elif kind == "polytope":
        f = OrthonormalPolytope(b["normals"], b["lower"], b["upper"])
    elif kind == "collision":
        f = CollisionField(b["agents"])
    else:
        f = OffroadField(b["agents"], DrivableRegion(b["polygons"]))
    if b["normalize"]:
        f = NormalizedField(f)
    return ManualBridge(f, _gamma(b), clamp=b["clamp"], name=name)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                       comment_prefixes=("#",), empty_lines_in_values=False)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for s in raw:
        if s not in ("data", *SECTION_KEYS) and not s.startswith("bridge."):
            raise ConfigError(f"[{s}]: unknown section")
    data_raw = dict(raw.get("data", {}))
    gen = data_raw.get("generator")
    if gen is None:
        raise ConfigError("[data] generator: missing required key")
    if gen not in GENERATORS:
        raise ConfigError(f"[data] generator: expected one of {', '.join(GENERATORS)}, got {gen!r}")
    data = {"generator": gen, **_resolve_keys("data", {k: v for k, v in data_raw.items() if k != "generator"},
                                              DATA_KEYS[gen])}
    rest = {name: _resolve_keys(name, raw.get(name, {}), vocab) for name, vocab in SECTION_KEYS.items()}
    bridges = {}
    for s, values in raw.items():
        if not s.startswith("bridge."):
            continue
        name = s[len("bridge."):]
        if not name or name == "valid" or name.startswith("x"):
            raise ConfigError(f"[{s}]: bridge names must be non-empty and must not be 'valid' or start with 'x'")
        kind = values.get("field")
        if kind is None:
            raise ConfigError(f"[{s}] field: missing required key")
        if kind not in FIELDS:
            raise ConfigError(f"[{s}] field: expected one of {', '.join(FIELDS)}, got {kind!r}")
        bridges[name] = {"field": kind, **_resolve_keys(s, {k: v for k, v in values.items() if k != "field"},
                                                        BRIDGE_KEYS[kind])}
    return RunConfig(data, rest["model"], rest["diffusion"], rest["sampler"], rest["train"], bridges)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def materialize(cfg: RunConfig, data: np.ndarray, extras: dict) -> RunConfig:
    """Fill ``data`` placeholders from generator ``extras`` and ``auto`` sigma from the dataset.

    ``extras`` may hold ``normals``, ``lower``, ``upper``, ``agents`` and
    ``polygons``.  Returns a new config; the input is not modified.
    """
    bridges = {}
    sigma = None
    for name, b in cfg.bridges.items():
        b = dict(b)
        for key, value in b.items():
            if isinstance(value, str) and value == PLACEHOLDER and key != "field":
                if key not in extras:
                    raise ConfigError(f"[bridge.{name}] {key}: the {cfg.data['generator']} generator "
                                      f"provides no value; set it explicitly")
                b[key] = extras[key]
        if b.get("sigma_data") == AUTO:
            if sigma is None:
                sigma = estimate_sigma_data(data)
            b["sigma_data"] = sigma
        for key in ("lower", "upper"):
            if key in b:
                b[key] = np.atleast_1d(np.asarray(b[key], dtype=np.float64))
        bridges[name] = b
    return RunConfig(dict(cfg.data), dict(cfg.model), dict(cfg.diffusion), dict(cfg.sampler), dict(cfg.train),
                     bridges)

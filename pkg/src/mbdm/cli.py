"""Command-line interface: ``mbdm data|train|sample|eval|plot``.

Exit codes: 0 success, 2 usage or configuration error, 3 data validation
failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from mbdm.bridges import ComposedScore, guidance_score, prior_score
from mbdm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mbdm.config import RunConfig, load_config, materialize, parse_config
from mbdm.diffusion import TrainState, ValidationSet, split_dataset, train
from mbdm.errors import ConfigError, MBDMError, UsageError
from mbdm.files import build_dataset, fmt, read_table, write_ppm, write_table
from mbdm.metrics import energy_distance, infraction_loss, infraction_rate
from mbdm.plot import pixel_centers, render_scatter
from mbdm.sampler import sample

MODES = ("model", "prior", "guidance")


def worker_count() -> int:
    raw = os.environ.get("MBDM_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MBDM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("MBDM_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def resolve_run(path) -> tuple[RunConfig, np.ndarray]:
    """Load a config, build its dataset and fill the placeholders."""
    cfg = load_config(path)
    data, extras = build_dataset(cfg)
    return materialize(cfg, data, extras), data


def constraint_config(path) -> RunConfig:
    cfg = load_config(path)
    if not cfg.is_materialized:
        data, extras = build_dataset(cfg)
        cfg = materialize(cfg, data, extras)
    return cfg


def _emit(obj: dict):
    print(json.dumps(obj, sort_keys=True), flush=True)


# ---------------------------------------------------------------- data
def cmd_data(args) -> int:
    cfg, data = resolve_run(args.config)
    write_table(args.out, data)
    _emit({"rows": int(len(data)), "dim": int(data.shape[1]), "out": str(args.out)})
    return 0


# ---------------------------------------------------------------- train
METRICS_HEADER = "iteration,train_loss,r_elbo\n"


def _snapshot(state: TrainState, cfg: RunConfig) -> Checkpoint:
    return Checkpoint(cfg.model["arch"], state.params, state.sigma_data, state.rng.bit_generator.state,
                      state.iteration, cfg.hash(), cfg.text(), state.adam)


def cmd_train(args) -> int:
    cfg, data = resolve_run(args.config)
    tcfg = cfg.train_config()
    bridges = cfg.build_bridges()
    dims = {b.dim for b in bridges}
    if dims and dims != {data.shape[1]}:
        raise ConfigError(f"bridge dimension {sorted(dims)} does not match data dimension {data.shape[1]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.text(), encoding="utf-8")

    state = None
    metrics = out / "metrics.csv"
    kept = METRICS_HEADER
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.config_hash != cfg.hash():
            raise ConfigError(f"checkpoint {args.resume} was written under a different config (hash mismatch); "
                              "refusing to resume")
        if ck.adam is None:
            raise ConfigError(f"checkpoint {args.resume} holds no optimizer state; cannot resume")
        state = TrainState(ck.params, ck.adam, ck.iteration, ck.generator(), ck.sigma_data)
        if metrics.exists():
            lines = metrics.read_text(encoding="utf-8").splitlines(keepends=True)[1:]
            kept += "".join(l for l in lines if l.split(",")[0].isdigit() and int(l.split(",")[0]) <= ck.iteration)
    metrics.write_text(kept, encoding="utf-8")

    with open(metrics, "a", encoding="utf-8") as log:
        def on_log(it, loss, r):
            log.write(f"{it},{fmt(loss)},{fmt(r)}\n")
            log.flush()

        def on_checkpoint(st):
            save_checkpoint(out / f"checkpoint-{st.iteration:08d}.mbdm", _snapshot(st, cfg))

        state = train(tcfg, data, bridges, cfg.schedule(), state=state, on_log=on_log,
                      on_checkpoint=on_checkpoint)
    final = out / "checkpoint.mbdm"
    save_checkpoint(final, _snapshot(state, cfg))
    last = state.history[-1][2] if state.history else None
    _emit({"iteration": state.iteration, "r_elbo": last, "checkpoint": str(final)})
    return 0


# ---------------------------------------------------------------- sample
def score_for_mode(mode: str, ck: Checkpoint, bridges) -> ComposedScore:
    model_bridges = list(bridges) if ck.arch != "plain" else []
    model = ComposedScore(ck.arch, ck.params, model_bridges, ck.sigma_data)
    if mode == "model":
        return model
    if not bridges:
        raise UsageError(f"--mode {mode} needs at least one bridge in the checkpoint's config")
    if mode == "prior":
        return prior_score(bridges)
    if ck.arch != "plain":
        raise UsageError(f"--mode guidance needs a plain-architecture checkpoint, got {ck.arch}")
    return guidance_score(model, bridges)


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = parse_config(ck.config_text, f"{args.checkpoint} (embedded config)")
    if cfg.model["arch"] != ck.arch:
        raise ConfigError("checkpoint architecture disagrees with its embedded config")
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    bridges = cfg.build_bridges()
    score = score_for_mode(args.mode, ck, bridges)
    scfg = cfg.sampler_config(steps=args.steps, solver=args.solver, s_churn=args.s_churn, seed=args.seed)
    batch = sample(score, args.n, ck.params.dim, scfg, constraints=bridges, workers=worker_count())
    cols = {name: m for name, m in batch.membership.items()}
    cols["valid"] = batch.valid
    write_table(args.out, batch.x, cols)
    _emit({"mode": args.mode, **batch.summary(), "out": str(args.out)})
    return 0


# ---------------------------------------------------------------- eval
def evaluate(samples: np.ndarray, reference: np.ndarray, bridges, r_elbo: float | None = None) -> dict:
    if samples.shape[1] != reference.shape[1]:
        raise UsageError(f"dimension mismatch: samples have {samples.shape[1]} coordinates, "
                         f"reference has {reference.shape[1]}")
    for b in bridges:
        if b.dim != samples.shape[1]:
            raise UsageError(f"constraint {b.name} has dimension {b.dim}, samples have {samples.shape[1]}")
    report: dict = {"n_samples": int(len(samples)), "n_reference": int(len(reference))}
    if bridges and len(samples):
        for k, v in infraction_rate({b.name: b.member(samples) for b in bridges}).items():
            report[f"infraction_rate.{k}"] = v
        for k, v in infraction_loss(samples, bridges).items():
            report[f"infraction_loss.{k}"] = v
    if len(samples) >= 2 and len(reference) >= 2:
        report["energy_distance"] = energy_distance(samples, reference)
    if r_elbo is not None:
        report["r_elbo"] = r_elbo
    return report


def checkpoint_r_elbo(ck: Checkpoint) -> float:
    """Validation r-ELBO of a checkpoint on the held-out split of its own dataset."""
    cfg = parse_config(ck.config_text, "embedded config")
    data, _ = build_dataset(cfg)
    t = cfg.train_config()
    train_x, val_x = split_dataset(data, t.val_fraction, t.seed)
    val = ValidationSet.build(val_x if len(val_x) else train_x, cfg.schedule(), t.val_sigmas, seed=t.seed + 1)
    bridges = cfg.build_bridges() if ck.arch != "plain" else []
    return val.r_elbo(ComposedScore(ck.arch, ck.params, bridges, ck.sigma_data))


def cmd_eval(args) -> int:
    samples, _ = read_table(args.samples)
    reference, _ = read_table(args.reference)
    bridges = constraint_config(args.config).build_bridges()
    r = checkpoint_r_elbo(load_checkpoint(args.checkpoint)) if args.checkpoint else None
    report = evaluate(samples, reference, bridges, r)
    _emit(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------- plot
def cmd_plot(args) -> int:
    x, _ = read_table(args.samples)
    d = x.shape[1]
    if d < 2:
        raise UsageError("plotting needs at least two coordinates")
    bridges = constraint_config(args.config).build_bridges()
    for b in bridges:
        if b.dim != d:
            raise UsageError(f"constraint {b.name} has dimension {b.dim}, samples have {d}")
    valid = np.ones(len(x), dtype=bool)
    for b in bridges:
        if len(x):
            valid &= b.member(x)
    mask = None
    if bridges:
        centers = pixel_centers(args.width, args.height, args.xlim, args.ylim)
        full = np.zeros((len(centers), d))
        full[:, :2] = centers
        inside = np.ones(len(full), dtype=bool)
        for b in bridges:
            inside &= b.member(full)
        mask = inside.reshape(args.height, args.width)
    try:
        img, outside = render_scatter(x[:, :2], valid, args.width, args.height, args.xlim, args.ylim, mask)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    caption = f"{len(x)} samples, {int((~valid).sum())} invalid (brown), {outside} outside the frame"
    if d > 2:
        caption += f"; showing x0 and x1 of {d} coordinates, mask evaluated with the rest at zero"
    write_ppm(args.out, img, caption)
    _emit({"width": args.width, "height": args.height, "samples": int(len(x)),
           "invalid": int((~valid).sum()), "outside": outside, "out": str(args.out)})
    return 0


# ---------------------------------------------------------------- entry point
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbdm", description="Constrained diffusion sampling with manual bridges.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("data", help="write the dataset described by a config")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_data)

    s = sub.add_parser("train", help="train a score model")
    s.add_argument("config")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--mode", choices=MODES, default="model")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--solver", choices=("euler-maruyama", "heun"))
    s.add_argument("--s-churn", type=float, dest="s_churn")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="metrics of a sample file against a reference file")
    s.add_argument("samples")
    s.add_argument("reference")
    s.add_argument("--config", required=True, help="config whose [bridge.*] sections define the constraints")
    s.add_argument("--checkpoint", help="also report the checkpoint's validation r-ELBO")
    s.add_argument("--out", help="write the report as JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="scatter plot over the constraint mask (binary PPM)")
    s.add_argument("samples")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=512)
    s.add_argument("--xlim", type=float, nargs=2, default=(-3.0, 3.0))
    s.add_argument("--ylim", type=float, nargs=2, default=(-3.0, 3.0))
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MBDMError as exc:
        print(f"mbdm {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mbdm {args.command}: error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

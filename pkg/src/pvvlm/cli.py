"""Command-line entry point: synth, train, eval, ablate, transfer, forecast.

Every command takes an optional flat `key = value` --config file plus
per-key overrides, and copies the resolved configuration into its output
directory so a run is reproducible from that file alone. Exit codes:
0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_run_config, write_resolved
from .dataio import build_samples, load_dataset_root, resample_2min, split_chronological
from .evaluation import evaluate, persistence_report, run_ablation, transfer_eval, write_per_sample_csv
from .fusion import build_model, forward
from .synthgen import write_dataset
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("pvvlm.cli")

CHECKPOINT_NAME = "checkpoint.pvvlm"


def _setup_logging() -> None:
    level_name = os.environ.get("PVVLM_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise ConfigError(f"PVVLM_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    for f in dataclasses.fields(RunConfig):
        ftype = {"int": int, "float": float, "str": str}[f.type]
        parser.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=ftype, default=None,
                            help=f"override {f.name} (default {f.default})")


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    return load_run_config(args.config, overrides)


def _prepare_out(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "config.resolved")


def _load_split(cfg: RunConfig, data_dir: Path, horizon_steps: int):
    series, images = load_dataset_root(data_dir)
    series = resample_2min(series)
    samples = build_samples(series, images, horizon_steps,
                            night_filter_frac=cfg.night_filter_frac,
                            image_tolerance_s=cfg.image_tolerance_s)
    return split_chronological(samples)


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    manifest = write_dataset(cfg.days, cfg.scene_config(), args.out)
    print(f"wrote {manifest['rows']} power rows and {manifest['images']} images to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    split = _load_split(cfg, args.data, cfg.horizon_steps)
    dims = cfg.model_dims()
    model = build_model(dims, cfg.seed)
    ckpt, history = train(split, model, cfg.train_config())
    ckpt_path = args.out / CHECKPOINT_NAME
    save_checkpoint(ckpt, ckpt_path)
    with open(args.out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_mse", "val_mse"])
        for row in history:
            writer.writerow([row["epoch"], f"{row['lr']:.8f}", f"{row['train_mse']:.8f}", f"{row['val_mse']:.8f}"])
    print(f"best epoch {ckpt.epoch} val_mse {ckpt.best_val_loss:.6f} -> {ckpt_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(cfg, args.data, ckpt.dims.horizon_steps)
    model = ckpt.to_model()
    report = evaluate(model, split.test)
    write_per_sample_csv(report, args.out / "per_sample.csv")
    baseline = persistence_report(split.test, ckpt.dims.horizon_minutes)
    r2 = "undefined" if report.r2 is None else f"{report.r2:.4f}"
    print(f"horizon {report.horizon_minutes} min: rmse {report.rmse:.4f} kW, mae {report.mae:.4f} kW, "
          f"r2 {r2}, n={report.n_samples} (persistence rmse {baseline.rmse:.4f} kW)")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    series, images = load_dataset_root(args.data)
    series = resample_2min(series)
    report = run_ablation(series, images, cfg.model_dims(), cfg.train_config(),
                          night_filter_frac=cfg.night_filter_frac)
    report.write_csv(args.out / "ablation.csv")
    print(f"wrote {len(report.cells)} ablation cells to {args.out / 'ablation.csv'}")
    return 0


def cmd_transfer(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(cfg, args.data, ckpt.dims.horizon_steps)
    report = transfer_eval(ckpt, split.test)
    write_per_sample_csv(report, args.out / "per_sample.csv")
    r2 = "undefined" if report.r2 is None else f"{report.r2:.4f}"
    print(f"transfer horizon {report.horizon_minutes} min: rmse {report.rmse:.4f} kW, "
          f"mae {report.mae:.4f} kW, r2 {r2}, n={report.n_samples} (no fine-tuning, hash-verified)")
    return 0


def cmd_forecast(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    _prepare_out(cfg, args.out)
    ckpt = load_checkpoint(args.checkpoint)
    split = _load_split(cfg, args.data, ckpt.dims.horizon_steps)
    samples = split.test or split.val or split.train
    if not -len(samples) <= args.index < len(samples):
        raise ValueError(f"sample index {args.index} out of range for {len(samples)} test samples")
    sample = samples[args.index]
    model = ckpt.to_model()
    pred = forward(sample, model)
    print(" ".join(f"{v:.4f}" for v in pred))
    with open(args.out / "per_sample.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor_time", "step", "y_kw", "yhat_kw"])
        for step, (yv, pv) in enumerate(zip(sample.target, pred)):
            writer.writerow([sample.anchor_time, step, f"{yv:.6f}", f"{pv:.6f}"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvvlm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"pvvlm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    specs = {
        "synth": (cmd_synth, ("out",)),
        "train": (cmd_train, ("data", "out")),
        "eval": (cmd_eval, ("data", "checkpoint", "out")),
        "ablate": (cmd_ablate, ("data", "out")),
        "transfer": (cmd_transfer, ("data", "checkpoint", "out")),
        "forecast": (cmd_forecast, ("data", "checkpoint", "out")),
    }
    for name, (func, required) in specs.items():
        p = sub.add_parser(name)
        if "data" in required:
            p.add_argument("--data", type=Path, required=True, help="dataset root (power.csv + images/)")
        if "checkpoint" in required:
            p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "forecast":
            p.add_argument("--index", type=int, default=-1, help="test-sample index to forecast")
        _add_config_flags(p)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors exit 2 on their own
        raise exc
    except Exception as exc:
        log.debug("traceback", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

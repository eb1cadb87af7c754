"""Metrics, test-set evaluation, the ablation matrix, and transfer checks."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetSplit, PowerSeries, SampleRecord, SkyImage, build_samples, split_chronological
from .fusion import build_model, forward_prepared, prepare_samples
from .model import ModelDims, ModelParams, VARIANTS
from .numerics import no_grad
from .temporal import denormalize
from .training import Checkpoint, CheckpointError, TrainConfig, train

log = logging.getLogger("pvvlm.evaluation")

HORIZON_STEP_CHOICES = (10, 20, 30)


def metrics(y: np.ndarray, yhat: np.ndarray) -> tuple[float, float, float | None]:
    """(rmse, mae, r2) in the units of y; r2 is None when y is constant."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.size == 0:
        raise ValueError(f"metrics need equal nonempty vectors, got {y.shape} vs {yhat.shape}")
    err = yhat - y
    rmse = float(np.sqrt(np.mean(err * err)))
    mae = float(np.mean(np.abs(err)))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return rmse, mae, None
    ss_res = float(np.sum(err * err))
    return rmse, mae, 1.0 - ss_res / ss_tot


@dataclass
class ForecastReport:
    horizon_minutes: int
    rmse: float
    mae: float
    r2: float | None  # None = undefined (constant actuals), distinct from 0.0
    n_samples: int
    rows: list[tuple[int, int, float, float]] | None = None  # (anchor_time, step, y_kw, yhat_kw)

    def __post_init__(self):
        if self.rmse + 1e-12 < self.mae:
            raise ValueError(f"rmse {self.rmse} < mae {self.mae} violates the power-mean inequality")
        if self.r2 is not None and self.r2 > 1.0 + 1e-12:
            raise ValueError(f"r2 {self.r2} > 1")


def persistence_baseline(sample: SampleRecord) -> np.ndarray:
    """Repeat the last observed value across the horizon."""
    if len(sample.input_window) == 0:
        raise ValueError("empty input window")
    return np.full(len(sample.target), sample.input_window[-1], dtype=np.float64)


def persistence_report(samples: list[SampleRecord], horizon_minutes: int) -> ForecastReport:
    y = np.concatenate([s.target for s in samples])
    yhat = np.concatenate([persistence_baseline(s) for s in samples])
    rmse, mae, r2 = metrics(y, yhat)
    return ForecastReport(horizon_minutes, rmse, mae, r2, n_samples=len(samples))


def evaluate(model: ModelParams, samples: list[SampleRecord], abl=None,
             collect_rows: bool = True) -> ForecastReport:
    """Forecast every sample and pool all (sample, step) pairs in kW space."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    abl = abl if abl is not None else model.dims.ablation
    prepared = prepare_samples(samples, model, abl)
    y_all: list[np.ndarray] = []
    yhat_all: list[np.ndarray] = []
    rows: list[tuple[int, int, float, float]] = []
    with no_grad():
        for prep in prepared:
            pred_kw = denormalize(forward_prepared(prep, model, abl).data, prep.wn)
            y_all.append(prep.target_kw)
            yhat_all.append(pred_kw)
            if collect_rows:
                for step, (yv, pv) in enumerate(zip(prep.target_kw, pred_kw)):
                    rows.append((prep.anchor_time, step, float(yv), float(pv)))
    y = np.concatenate(y_all)
    yhat = np.concatenate(yhat_all)
    rmse, mae, r2 = metrics(y, yhat)
    return ForecastReport(
        horizon_minutes=model.dims.horizon_minutes,
        rmse=rmse,
        mae=mae,
        r2=r2,
        n_samples=len(samples),
        rows=rows if collect_rows else None,
    )


def write_per_sample_csv(report: ForecastReport, path: str | Path) -> None:
    if report.rows is None:
        raise ValueError("report carries no per-sample rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["anchor_time", "step", "y_kw", "yhat_kw"])
        for row in report.rows:
            writer.writerow([row[0], row[1], f"{row[2]:.6f}", f"{row[3]:.6f}"])


def recompute_metrics_from_rows(rows) -> tuple[float, float, float | None]:
    y = np.array([r[2] for r in rows])
    yhat = np.array([r[3] for r in rows])
    return metrics(y, yhat)


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

@dataclass
class AblationReport:
    """6 variants x 3 horizons; failed cells carry the failure message."""

    cells: dict[tuple[str, int], ForecastReport | str]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "horizon_min", "rmse_kw", "mae_kw", "r2"])
            for variant in VARIANTS:
                for h_min in sorted({k[1] for k in self.cells}):
                    cell = self.cells[(variant, h_min)]
                    if isinstance(cell, str):
                        writer.writerow([variant, h_min, "failed", "failed", "failed"])
                    else:
                        r2 = "undefined" if cell.r2 is None else f"{cell.r2:.6f}"
                        writer.writerow([variant, h_min, f"{cell.rmse:.6f}", f"{cell.mae:.6f}", r2])


def run_ablation(
    power: PowerSeries,
    images: list[SkyImage],
    base_dims: ModelDims,
    cfg: TrainConfig,
    horizon_steps: tuple[int, ...] = HORIZON_STEP_CHOICES,
    night_filter_frac: float = 0.01,
    capacity_kw: float | None = None,
) -> AblationReport:
    """Train and evaluate all six variants on each horizon with shared seeds.

    The series is re-windowed per horizon (input length tracks 2x horizon),
    so the raw 2-minute series and image set come in rather than a single
    fixed split.
    """
    cells: dict[tuple[str, int], ForecastReport | str] = {}
    for h_steps in horizon_steps:
        samples = build_samples(power, images, h_steps, capacity_kw=capacity_kw,
                                night_filter_frac=night_filter_frac)
        split = split_chronological(samples)
        for variant in VARIANTS:
            dims = dataclasses.replace(base_dims, horizon_steps=h_steps, variant=variant)
            key = (variant, dims.horizon_minutes)
            try:
                model = build_model(dims, cfg.seed)
                train(split, model, cfg)
                cells[key] = evaluate(model, split.test, collect_rows=False)
                log.info("ablation %s h=%dmin rmse %.4f", variant, dims.horizon_minutes, cells[key].rmse)
            except Exception as exc:  # partial report with failure markers
                log.exception("ablation cell %s failed", key)
                cells[key] = f"{type(exc).__name__}: {exc}"
    return AblationReport(cells)


# ---------------------------------------------------------------------------
# transfer protocol
# ---------------------------------------------------------------------------

def transfer_eval(ckpt: Checkpoint, target_samples: list[SampleRecord]) -> ForecastReport:
    """Pure inference of a trained checkpoint on a different plant.

    Refuses dimension mismatches and verifies via parameter hashing that no
    weight changed during evaluation.
    """
    if not target_samples:
        raise ValueError("no target samples")
    dims = ckpt.dims
    probe = target_samples[0]
    if len(probe.input_window) != dims.input_len:
        raise CheckpointError(
            f"manifest mismatch on input length: checkpoint expects {dims.input_len}, "
            f"samples have {len(probe.input_window)}"
        )
    if len(probe.target) != dims.horizon_steps:
        raise CheckpointError(
            f"manifest mismatch on horizon_steps: checkpoint expects {dims.horizon_steps}, "
            f"samples have {len(probe.target)}"
        )
    if (probe.image.width, probe.image.height) != (dims.image_size, dims.image_size):
        raise CheckpointError(
            f"manifest mismatch on image_size: checkpoint expects {dims.image_size}, "
            f"samples are {probe.image.width}x{probe.image.height}"
        )
    model = ckpt.to_model()
    hash_before = model.param_hash()
    report = evaluate(model, target_samples)
    hash_after = model.param_hash()
    if hash_before != hash_after:
        raise RuntimeError("parameters changed during transfer evaluation")
    return report

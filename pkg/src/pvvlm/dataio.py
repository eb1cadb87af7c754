"""Dataset ingestion: power CSV, PPM sky images, resampling, windowing.

External formats: `power.csv` with header ``timestamp,power_kw`` (ISO-8601
UTC timestamps), and binary P6 PPM images named ``YYYYMMDDHHMMSS.ppm``
under an ``images/`` directory next to the CSV.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger("pvvlm.dataio")

VALID_HORIZON_STEPS = (10, 20, 30)
STEP_SECONDS = 120  # cadence after 2-minute resampling


class DataFormatError(ValueError):
    """Malformed input data (CSV rows, PPM payloads, filenames)."""


@dataclass
class PowerSeries:
    """Strictly increasing epoch-second timestamps with kW values."""

    timestamps: np.ndarray  # int64 epoch seconds
    values: np.ndarray  # float64 kW

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape:
            raise DataFormatError("timestamps and values must have equal length")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DataFormatError("timestamps must be strictly increasing")
        if np.any(self.values < 0):
            raise DataFormatError("power values must be non-negative")

    def __len__(self) -> int:
        return len(self.timestamps)


@dataclass
class SkyImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8 (height, width, 3), row-major RGB
    timestamp: int  # epoch seconds
    channels: int = 3

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width, 3):
            raise DataFormatError(
                f"pixel buffer shape {self.pixels.shape} != ({self.height}, {self.width}, 3)"
            )


@dataclass
class SampleRecord:
    """One aligned training example.

    input_window covers the L steps ending at anchor_time (inclusive);
    target covers the H steps after it. L == 2 * H.
    """

    input_window: np.ndarray  # float64 kW, length L
    target: np.ndarray  # float64 kW, length H
    image: SkyImage
    anchor_time: int  # epoch seconds of the last input step

    def __post_init__(self):
        self.input_window = np.asarray(self.input_window, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if len(self.input_window) != 2 * len(self.target):
            raise ValueError(
                f"input length {len(self.input_window)} != 2 * horizon {len(self.target)}"
            )
        if self.image.timestamp != self.anchor_time:
            raise ValueError("image timestamp must equal the anchor time")


@dataclass
class DatasetSplit:
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]


def _parse_iso_utc(text: str) -> int:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int(ts.timestamp())


def load_power_csv(path: str | Path) -> PowerSeries:
    """Parse and validate a power CSV, returning a sorted series."""
    path = Path(path)
    rows: list[tuple[int, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "power_kw"]:
            raise DataFormatError(f"{path}: expected header 'timestamp,power_kw', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = _parse_iso_utc(row[0].strip())
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {row[0]!r}: {exc}") from exc
            try:
                value = float(row[1])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad power value {row[1]!r}") from exc
            if not math.isfinite(value):
                raise DataFormatError(f"{path}:{lineno}: non-finite power value {row[1]!r}")
            if value < 0:
                raise DataFormatError(f"{path}:{lineno}: negative power {value} kW")
            rows.append((ts, value))
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    rows.sort()
    deduped = [rows[0]]
    for ts, value in rows[1:]:
        if (ts, value) == deduped[-1]:
            continue  # exact duplicate row
        if ts <= deduped[-1][0]:
            raise DataFormatError(f"{path}: conflicting rows share timestamp {ts}")
        deduped.append((ts, value))
    timestamps = np.array([r[0] for r in deduped], dtype=np.int64)
    values = np.array([r[1] for r in deduped], dtype=np.float64)
    return PowerSeries(timestamps, values)


# ---------------------------------------------------------------------------
# PPM decoding
# ---------------------------------------------------------------------------

def timestamp_from_filename(path: str | Path) -> int:
    """Epoch seconds from a `YYYYMMDDHHMMSS.ppm` filename."""
    stem = Path(path).stem
    if len(stem) != 14 or not stem.isdigit():
        raise DataFormatError(f"cannot parse timestamp from filename {Path(path).name!r}")
    try:
        dt = datetime.strptime(stem, "%Y%m%d%H%M%S").replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise DataFormatError(f"cannot parse timestamp from filename {Path(path).name!r}") from exc
    return int(dt.timestamp())


def _read_ppm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header fields
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataFormatError("truncated PPM header")
    return buf[start:pos], pos


def decode_ppm(path: str | Path) -> SkyImage:
    """Decode a binary P6 PPM (maxval 255) named `YYYYMMDDHHMMSS.ppm`."""
    path = Path(path)
    ts = timestamp_from_filename(path)
    buf = path.read_bytes()
    magic, pos = _read_ppm_token(buf, 0)
    if magic != b"P6":
        raise DataFormatError(f"{path.name}: unsupported magic {magic!r} (want P6)")
    fields = []
    for _ in range(3):
        token, pos = _read_ppm_token(buf, pos)
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise DataFormatError(f"{path.name}: non-numeric header field {token!r}") from exc
    width, height, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{path.name}: unsupported maxval {maxval} (want 255)")
    if width <= 0 or height <= 0:
        raise DataFormatError(f"{path.name}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    payload = buf[pos : pos + expected]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path.name}: truncated pixel payload ({len(payload)} of {expected} bytes)"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return SkyImage(width=width, height=height, pixels=pixels.copy(), timestamp=ts)


def load_dataset_root(root: str | Path) -> tuple[PowerSeries, list[SkyImage]]:
    """Read the `power.csv` + `images/*.ppm` layout under `root`."""
    root = Path(root)
    series = load_power_csv(root / "power.csv")
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DataFormatError(f"missing images directory {images_dir}")
    images = [decode_ppm(p) for p in sorted(images_dir.glob("*.ppm"))]
    return series, images


# ---------------------------------------------------------------------------
# resampling / windowing / splitting
# ---------------------------------------------------------------------------

def resample_2min(series: PowerSeries) -> PowerSeries:
    """1-min -> 2-min by keeping every second sample, starting at the first.

    Subsampling (not averaging) preserves the instantaneous ramps the
    forecaster has to learn.
    """
    return PowerSeries(series.timestamps[::2].copy(), series.values[::2].copy())


@dataclass
class BuildStats:
    anchors_total: int = 0
    dropped_no_image: int = 0
    dropped_night: int = 0
    kept: int = 0


def build_samples(
    power: PowerSeries,
    images: list[SkyImage],
    horizon_steps: int,
    capacity_kw: float | None = None,
    night_filter_frac: float = 0.01,
    image_tolerance_s: int = 0,
    stats: BuildStats | None = None,
) -> list[SampleRecord]:
    """Align windows, targets, and images into SampleRecords.

    Anchor index i yields input [i-L, i) and target [i, i+H) with
    L = 2 * horizon_steps; the image must match the last input step's
    timestamp exactly (or within image_tolerance_s when > 0). Windows that
    never reach night_filter_frac of plant capacity are dropped.
    """
    if horizon_steps not in VALID_HORIZON_STEPS:
        raise ValueError(f"horizon_steps must be one of {VALID_HORIZON_STEPS}, got {horizon_steps}")
    h = horizon_steps
    length = 2 * h
    n = len(power)
    if capacity_kw is None:
        capacity_kw = float(power.values.max()) if n else 0.0
    by_time = {img.timestamp: img for img in images}
    sorted_times = np.array(sorted(by_time)) if by_time else np.array([], dtype=np.int64)
    stats = stats if stats is not None else BuildStats()
    night_floor = night_filter_frac * capacity_kw

    records: list[SampleRecord] = []
    for i in range(length, n - h + 1):
        stats.anchors_total += 1
        anchor_time = int(power.timestamps[i - 1])
        image = by_time.get(anchor_time)
        if image is None and image_tolerance_s > 0 and len(sorted_times):
            j = int(np.searchsorted(sorted_times, anchor_time))
            best = None
            for cand in (j - 1, j):
                if 0 <= cand < len(sorted_times):
                    gap = abs(int(sorted_times[cand]) - anchor_time)
                    if gap <= image_tolerance_s and (best is None or gap < best[0]):
                        best = (gap, int(sorted_times[cand]))
            if best is not None:
                # near-miss match: re-stamp a shallow copy at the anchor so the
                # record invariant (image time == anchor time) stays intact
                src = by_time[best[1]]
                image = SkyImage(width=src.width, height=src.height,
                                 pixels=src.pixels, timestamp=anchor_time)
        if image is None:
            stats.dropped_no_image += 1
            continue
        window = power.values[i - length : i]
        if night_floor > 0 and np.all(window < night_floor):
            stats.dropped_night += 1
            continue
        records.append(
            SampleRecord(
                input_window=window.copy(),
                target=power.values[i : i + h].copy(),
                image=image,
                anchor_time=anchor_time,
            )
        )
        stats.kept += 1
    if not records:
        raise ValueError("no alignable samples")
    log.info(
        "built %d samples (%d anchors, %d lacked an image, %d night-filtered)",
        stats.kept, stats.anchors_total, stats.dropped_no_image, stats.dropped_night,
    )
    return records


def split_chronological(samples: list[SampleRecord]) -> DatasetSplit:
    """70/10/20 chronological holdout by anchor time."""
    if len(samples) < 10:
        raise ValueError(f"need at least 10 samples to split, got {len(samples)}")
    ordered = sorted(samples, key=lambda s: s.anchor_time)
    n = len(ordered)
    n_train = int(0.7 * n)
    n_val = int(0.1 * n)
    return DatasetSplit(
        train=ordered[:n_train],
        val=ordered[n_train : n_train + n_val],
        test=ordered[n_train + n_val :],
    )


def _input_interval(s: SampleRecord, step_s: int) -> tuple[int, int]:
    length = len(s.input_window)
    return (s.anchor_time - (length - 1) * step_s, s.anchor_time)


def _target_interval(s: SampleRecord, step_s: int) -> tuple[int, int]:
    h = len(s.target)
    return (s.anchor_time + step_s, s.anchor_time + h * step_s)


def count_target_into_later_input_overlaps(split: DatasetSplit, step_s: int = STEP_SECONDS) -> int:
    """Diagnostic: earlier-split target intervals overlapping later-split inputs.

    With stride-1 sliding windows and exact 70/10/20 counts this is nonzero
    at split boundaries by construction; it is reported, not enforced.
    """
    count = 0
    parts = [split.train, split.val, split.test]
    for earlier_idx in range(len(parts)):
        for later_idx in range(earlier_idx + 1, len(parts)):
            for s in parts[earlier_idx]:
                t_lo, t_hi = _target_interval(s, step_s)
                for u in parts[later_idx]:
                    i_lo, i_hi = _input_interval(u, step_s)
                    if t_lo <= i_hi and i_lo <= t_hi:
                        count += 1
    return count


def assert_no_future_leakage(split: DatasetSplit, step_s: int = STEP_SECONDS) -> None:
    """No later-split target step may appear in any earlier split's inputs."""
    parts = [split.train, split.val, split.test]
    max_input_end = [max((_input_interval(s, step_s)[1] for s in p), default=-(10**18)) for p in parts]
    for earlier_idx in range(len(parts)):
        for later_idx in range(earlier_idx + 1, len(parts)):
            for s in parts[later_idx]:
                t_lo, _ = _target_interval(s, step_s)
                if t_lo <= max_input_end[earlier_idx]:
                    raise AssertionError(
                        f"target starting at {t_lo} overlaps split-{earlier_idx} inputs"
                    )

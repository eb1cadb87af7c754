"""Deterministic synthetic sky-image + PV-power co-generator.

Each synthetic day drives one cloud disk across a rendered sky at constant
(seeded) velocity. Power is the clear-sky curve attenuated by the exact
cloud/sun overlap fraction plus truncated Gaussian noise, so the current
frame deterministically predicts when the next dip arrives: the dataset
carries genuine image-borne predictive signal by construction.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .dataio import PowerSeries, SkyImage

log = logging.getLogger("pvvlm.synthgen")

BASE_EPOCH = 1704067200  # 2024-01-01T00:00:00Z
DAY_START_OFFSET_S = 8 * 3600  # first sample of each day at 08:00 UTC
CLOUD_GRAY = 217  # 85% gray
CLOUD_EDGE_PX = 2.0


@dataclass
class SceneConfig:
    image_size: int = 64
    sun_center: tuple[float, float] | None = None  # defaults to image center
    sun_radius: float = 7.0
    cloud_radius: float = 10.0
    cloud_velocity: float = 0.5  # px per step
    attenuation: float = 0.8
    day_length_steps: int = 240  # 1-minute steps
    capacity_kw: float = 30.0
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError(f"attenuation {self.attenuation} outside [0, 1]")
        if self.sun_radius <= 0 or self.cloud_radius <= 0:
            raise ValueError("radii must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.day_length_steps < 2:
            raise ValueError("day_length_steps must be >= 2")

    @property
    def sun_xy(self) -> tuple[float, float]:
        if self.sun_center is not None:
            return self.sun_center
        c = (self.image_size - 1) / 2.0
        return (c, c)


def plant_profile(name: str, seed: int = 0) -> SceneConfig:
    """Two plant presets mirroring a large and a small installation."""
    if name == "a":
        return SceneConfig(capacity_kw=30.0, noise_std=0.3, seed=seed)
    if name == "b":
        return SceneConfig(capacity_kw=6.0, noise_std=0.06, seed=seed)
    raise ValueError(f"unknown plant profile {name!r} (want 'a' or 'b')")


def clear_sky_power(step: int, cfg: SceneConfig) -> float:
    """capacity * sin^2(pi * step / day_length): zero at day edges, peak at midday."""
    if not 0 <= step < cfg.day_length_steps:
        raise ValueError(f"step {step} outside [0, {cfg.day_length_steps})")
    return cfg.capacity_kw * math.sin(math.pi * step / cfg.day_length_steps) ** 2


def disk_overlap_area(c1: tuple[float, float], r1: float, c2: tuple[float, float], r2: float) -> float:
    """Exact intersection area of two disks (lens formula)."""
    d = math.hypot(c1[0] - c2[0], c1[1] - c2[1])
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2))
    kite = 0.5 * math.sqrt(
        (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)
    )
    return a1 + a2 - kite


def _sky_background(size: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, size, dtype=np.float32)[:, None]
    img = np.empty((size, size, 3), dtype=np.float32)
    img[:, :, 0] = 70.0 + 30.0 * g
    img[:, :, 1] = 110.0 + 30.0 * g
    img[:, :, 2] = 180.0 + 40.0 * g
    return img


def _paint_disk(img: np.ndarray, center: tuple[float, float], radius: float,
                color: tuple[float, float, float], edge: float) -> None:
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    dist = np.sqrt((xs - center[0]) ** 2 + (ys - center[1]) ** 2)
    alpha = np.clip((radius + edge - dist) / edge, 0.0, 1.0)[:, :, None]
    img[:] = alpha * np.asarray(color, dtype=np.float32) + (1.0 - alpha) * img


@dataclass
class CloudTrack:
    """Per-day cloud trajectory: constant velocity, seeded entry and jitter."""

    start_x: float
    y: float
    velocity_x: float  # signed px/step

    def position(self, step: int) -> tuple[float, float]:
        return (self.start_x + self.velocity_x * step, self.y)


def _sample_cloud_track(cfg: SceneConfig, rng: np.random.Generator) -> CloudTrack:
    sun_x, sun_y = cfg.sun_xy
    direction = 1.0 if rng.random() < 0.5 else -1.0
    speed = cfg.cloud_velocity * rng.uniform(0.7, 1.3)
    cross_step = rng.uniform(0.1, 0.9) * cfg.day_length_steps
    y = sun_y + rng.uniform(-0.5, 0.5) * cfg.sun_radius
    return CloudTrack(start_x=sun_x - direction * speed * cross_step, y=y, velocity_x=direction * speed)


def render_frame(cfg: SceneConfig, cloud_xy: tuple[float, float], timestamp: int) -> SkyImage:
    img = _sky_background(cfg.image_size)
    _paint_disk(img, cfg.sun_xy, cfg.sun_radius, (250.0, 240.0, 200.0), 1.5)
    _paint_disk(img, cloud_xy, cfg.cloud_radius, (CLOUD_GRAY, CLOUD_GRAY, CLOUD_GRAY), CLOUD_EDGE_PX)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SkyImage(width=cfg.image_size, height=cfg.image_size, pixels=pixels, timestamp=timestamp)


def render_and_power(day: int, cfg: SceneConfig) -> tuple[list[SkyImage], PowerSeries]:
    """One synthetic day: a frame per step plus the coupled power trace.

    power = clear_sky * (1 - attenuation * overlap_fraction) + noise, where
    overlap_fraction is the cloud/sun disk intersection over the sun's area
    and the noise is Gaussian truncated at +-3 sigma, clipped at zero.
    """
    rng = np.random.default_rng([cfg.seed, day])
    track = _sample_cloud_track(cfg, rng)
    sun_area = math.pi * cfg.sun_radius**2
    day_base = BASE_EPOCH + day * 86400 + DAY_START_OFFSET_S

    images: list[SkyImage] = []
    timestamps = np.empty(cfg.day_length_steps, dtype=np.int64)
    values = np.empty(cfg.day_length_steps, dtype=np.float64)
    for step in range(cfg.day_length_steps):
        ts = day_base + 60 * step
        cloud_xy = track.position(step)
        images.append(render_frame(cfg, cloud_xy, ts))
        overlap = disk_overlap_area(cloud_xy, cfg.cloud_radius, cfg.sun_xy, cfg.sun_radius) / sun_area
        overlap = min(overlap, 1.0)
        noise = 0.0
        if cfg.noise_std > 0:
            noise = float(np.clip(rng.normal(0.0, cfg.noise_std), -3 * cfg.noise_std, 3 * cfg.noise_std))
        power = clear_sky_power(step, cfg) * (1.0 - cfg.attenuation * overlap) + noise
        timestamps[step] = ts
        values[step] = max(power, 0.0)
    return images, PowerSeries(timestamps, values)


def encode_ppm(image: SkyImage, path: str | Path) -> None:
    """Write a binary P6 PPM with maxval 255."""
    path = Path(path)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    path.write_bytes(header + image.pixels.tobytes())


def write_dataset(days: int, cfg: SceneConfig, out: str | Path) -> dict:
    """Emit `power.csv` + `images/*.ppm` under `out`; returns the manifest."""
    if days <= 0:
        raise ValueError("empty dataset requested (days must be >= 1)")
    out = Path(out)
    images_dir = out / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    n_rows = 0
    n_images = 0
    with open(out / "power.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("timestamp,power_kw\n")
        for day in range(days):
            images, series = render_and_power(day, cfg)
            for img in images:
                stamp = datetime.fromtimestamp(img.timestamp, tz=timezone.utc).strftime("%Y%m%d%H%M%S")
                encode_ppm(img, images_dir / f"{stamp}.ppm")
                n_images += 1
            for ts, value in zip(series.timestamps, series.values):
                iso = datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
                fh.write(f"{iso},{value:.6f}\n")
                n_rows += 1
    manifest = {
        "days": days,
        "steps_per_day": cfg.day_length_steps,
        "rows": n_rows,
        "images": n_images,
        "seed": cfg.seed,
        "capacity_kw": cfg.capacity_kw,
        "image_size": cfg.image_size,
        "attenuation": cfg.attenuation,
        "noise_std": cfg.noise_std,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %d rows and %d images to %s", n_rows, n_images, out)
    return manifest

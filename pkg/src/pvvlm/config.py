"""Flat key=value run configuration shared by all CLI commands."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelDims, variant_config
from .prompt import PromptTemplate
from .synthgen import SceneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # general
    seed: int = 0
    horizon_min: int = 20  # 20 | 40 | 60
    variant: str = "Proposed"
    # synthetic scene
    days: int = 10
    image_size: int = 64
    sun_radius: float = 7.0
    cloud_radius: float = 10.0
    cloud_speed: float = 0.5
    attenuation: float = 0.8
    day_length_steps: int = 240
    capacity_kw: float = 30.0
    noise_std: float = 0.3
    # model dims
    patch_len: int = 8
    stride: int = 4
    d_model: int = 64
    tam_layers: int = 2
    tam_heads: int = 4
    fusion_heads: int = 4
    d_vis: int = 64
    vis_depth: int = 2
    vis_heads: int = 4
    vis_patch: int = 8
    d_llm: int = 64
    llm_depth: int = 2
    llm_heads: int = 4
    n_soft: int = 8
    # training
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    eta0: float = 0.001
    gamma: float = 0.1
    step_s: int = 3
    clip_norm: float = 1.0
    # data handling
    night_filter_frac: float = 0.01
    image_tolerance_s: int = 0
    template_path: str = ""

    def __post_init__(self):
        if self.horizon_min not in (20, 40, 60):
            raise ConfigError(f"horizon_min must be 20, 40, or 60, got {self.horizon_min}")
        variant_config(self.variant)
        if self.template_path and not Path(self.template_path).is_file():
            raise ConfigError(f"template_path does not exist: {self.template_path}")

    @property
    def horizon_steps(self) -> int:
        return self.horizon_min // 2

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            image_size=self.image_size,
            sun_radius=self.sun_radius,
            cloud_radius=self.cloud_radius,
            cloud_velocity=self.cloud_speed,
            attenuation=self.attenuation,
            day_length_steps=self.day_length_steps,
            capacity_kw=self.capacity_kw,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def model_dims(self, horizon_steps: int | None = None, variant: str | None = None) -> ModelDims:
        template_text = ""
        if self.template_path:
            template_text = PromptTemplate.from_file(self.template_path).to_text()
        return ModelDims(
            horizon_steps=horizon_steps if horizon_steps is not None else self.horizon_steps,
            patch_len=self.patch_len,
            stride=self.stride,
            d_model=self.d_model,
            tam_layers=self.tam_layers,
            tam_heads=self.tam_heads,
            fusion_heads=self.fusion_heads,
            d_vis=self.d_vis,
            vis_depth=self.vis_depth,
            vis_heads=self.vis_heads,
            vis_patch=self.vis_patch,
            image_size=self.image_size,
            d_llm=self.d_llm,
            llm_depth=self.llm_depth,
            llm_heads=self.llm_heads,
            n_soft=self.n_soft,
            variant=variant if variant is not None else self.variant,
            template_text=template_text,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            eta0=self.eta0,
            gamma=self.gamma,
            step_s=self.step_s,
            seed=self.seed,
            clip_norm=self.clip_norm,
        )


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse `key = value` lines; '#' starts a comment; unknown keys fail."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def load_run_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then CLI overrides."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text("utf-8"), source=str(path)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = value
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def write_resolved(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

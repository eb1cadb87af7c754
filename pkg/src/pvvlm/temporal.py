"""Temporal path: window normalization, patching, trainable encoder.

The input window is z-scored per sample (inverted on the model output),
segmented into overlapping patches, linearly embedded with a learnable
positional table, and run through a trainable pre-norm transformer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import init_encoder_params, run_encoder, uniform_init
from .numerics import Tensor, add, matmul

STD_FLOOR = 1e-5


@dataclass
class PatchConfig:
    input_len: int
    patch_len: int = 8
    stride: int = 4
    d_model: int = 64
    layers: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.patch_len > self.input_len:
            raise ValueError(f"patch_len {self.patch_len} > input_len {self.input_len}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    @property
    def n_patches(self) -> int:
        return (self.input_len - self.patch_len) // self.stride + 1


@dataclass
class WindowNorm:
    mean: float
    std: float  # floored at STD_FLOOR

    def __post_init__(self):
        if self.std < STD_FLOOR:
            raise ValueError(f"std {self.std} below floor {STD_FLOOR}")


def normalize_window(window: np.ndarray) -> tuple[np.ndarray, WindowNorm]:
    """Per-window z-score with the std floored at 1e-5."""
    window = np.asarray(window, dtype=np.float64)
    if window.size == 0:
        raise ValueError("window must be nonempty")
    mean = float(window.mean())
    std = max(float(window.std()), STD_FLOOR)
    wn = WindowNorm(mean=mean, std=std)
    return (window - mean) / std, wn


def denormalize(values: np.ndarray, wn: WindowNorm) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * wn.std + wn.mean


def patchify(series: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Overlapping patches (N_patch, patch_len); trailing samples beyond the
    last full patch are dropped (floor semantics)."""
    series = np.asarray(series)
    if len(series) != cfg.input_len:
        raise ValueError(f"series length {len(series)} != configured input_len {cfg.input_len}")
    starts = range(0, cfg.input_len - cfg.patch_len + 1, cfg.stride)
    return np.stack([series[s : s + cfg.patch_len] for s in starts]).astype(np.float32)


def init_temporal_params(rng: np.random.Generator, cfg: PatchConfig, prefix: str = "tam.") -> dict[str, Tensor]:
    params = {
        prefix + "embed.w": Tensor(uniform_init(rng, (cfg.patch_len, cfg.d_model), cfg.patch_len), requires_grad=True),
        prefix + "embed.b": Tensor(np.zeros(cfg.d_model, dtype=np.float32), requires_grad=True),
        prefix + "pos": Tensor(uniform_init(rng, (cfg.n_patches, cfg.d_model), cfg.d_model), requires_grad=True),
    }
    params.update(init_encoder_params(rng, prefix, cfg.layers, cfg.d_model, trainable=True))
    return params


def encode_temporal(patches: Tensor | np.ndarray, cfg: PatchConfig, params: dict[str, Tensor],
                    prefix: str = "tam.") -> Tensor:
    """(N_patch, patch_len) -> (N_patch, d_model) through the trainable encoder."""
    x = patches if isinstance(patches, Tensor) else Tensor(patches)
    if x.shape != (cfg.n_patches, cfg.patch_len):
        raise ValueError(f"patches shape {x.shape} != ({cfg.n_patches}, {cfg.patch_len})")
    x = add(add(matmul(x, params[prefix + "embed.w"]), params[prefix + "embed.b"]), params[prefix + "pos"])
    return run_encoder(x, params, prefix, cfg.layers, cfg.heads)

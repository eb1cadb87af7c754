"""Vision path: image preprocessing and the trainable vision projection.

Preprocessing (resize, /255, per-channel standardization) feeds the frozen
image encoder; the projection (token-axis conv + MLP) maps its output into
the text backbone's embedding space.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .blocks import uniform_init
from .dataio import SkyImage
from .numerics import Tensor, add, conv1d, gelu, matmul


@dataclass
class ImageNormStats:
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("stats must have one entry per RGB channel")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")


def bilinear_resize(img: SkyImage | np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize to (H, W); returns float64 (H, W, 3).

    Source coordinate for output index x is x * (in - 1) / (out - 1), with
    coordinate 0 when an output extent is 1; each output pixel is a convex
    combination of its four neighbors.
    """
    h_out, w_out = target
    if h_out < 1 or w_out < 1:
        raise ValueError(f"target extents must be >= 1, got {target}")
    pixels = img.pixels if isinstance(img, SkyImage) else np.asarray(img)
    src = pixels.astype(np.float64)
    h_in, w_in = src.shape[0], src.shape[1]

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = coords(h_out, h_in)
    xs = coords(w_out, w_in)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def normalize_standardize(img: np.ndarray, stats: ImageNormStats) -> Tensor:
    """Map [0, 255] pixels to a standardized channel-first (3, H, W) tensor.

    out[c] = (pixel / 255 - mean[c]) / std[c].
    """
    arr = np.asarray(img, dtype=np.float64)
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    out = (arr / 255.0 - mean) / std
    return Tensor(out.transpose(2, 0, 1).astype(np.float32))


def unstandardize(t: Tensor | np.ndarray, stats: ImageNormStats) -> np.ndarray:
    """Inverse of normalize_standardize, back to (H, W, 3) in [0, 255]."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = arr.transpose(1, 2, 0).astype(np.float64)
    return (arr * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0


@lru_cache(maxsize=128)
def _posenc_cached(positions: int, dim: int) -> np.ndarray:
    pos = np.arange(positions, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.empty((positions, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    out = pe.astype(np.float32)
    out.setflags(write=False)
    return out


def sinusoidal_posenc(positions: int, dim: int) -> np.ndarray:
    """Classic sin/cos positional table, shape (positions, dim), float32.

    Cached per (positions, dim); the returned array is read-only.
    """
    if dim % 2 != 0:
        raise ValueError(f"posenc dim must be even, got {dim}")
    return _posenc_cached(positions, dim)


@dataclass
class VisionProjection:
    """Trainable projection: posenc add -> conv (kernel 3) -> 2-layer MLP."""

    conv_kernel: Tensor  # (3, d_vis, d_vis)
    conv_bias: Tensor  # (d_vis,)
    mlp_w1: Tensor  # (d_vis, 2*d_vis)
    mlp_b1: Tensor  # (2*d_vis,)
    mlp_w2: Tensor  # (2*d_vis, d_llm)
    mlp_b2: Tensor  # (d_llm,)

    @property
    def d_vis(self) -> int:
        return self.conv_kernel.shape[1]

    @property
    def d_llm(self) -> int:
        return self.mlp_w2.shape[1]

    @classmethod
    def from_params(cls, params, prefix: str = "vam.") -> "VisionProjection":
        return cls(
            conv_kernel=params[prefix + "conv.k"],
            conv_bias=params[prefix + "conv.b"],
            mlp_w1=params[prefix + "mlp.w1"],
            mlp_b1=params[prefix + "mlp.b1"],
            mlp_w2=params[prefix + "mlp.w2"],
            mlp_b2=params[prefix + "mlp.b2"],
        )


def init_vision_projection(rng: np.random.Generator, d_vis: int, d_llm: int, prefix: str = "vam.") -> dict[str, Tensor]:
    return {
        prefix + "conv.k": Tensor(uniform_init(rng, (3, d_vis, d_vis), 3 * d_vis), requires_grad=True),
        prefix + "conv.b": Tensor(np.zeros(d_vis, dtype=np.float32), requires_grad=True),
        prefix + "mlp.w1": Tensor(uniform_init(rng, (d_vis, 2 * d_vis), d_vis), requires_grad=True),
        prefix + "mlp.b1": Tensor(np.zeros(2 * d_vis, dtype=np.float32), requires_grad=True),
        prefix + "mlp.w2": Tensor(uniform_init(rng, (2 * d_vis, d_llm), 2 * d_vis), requires_grad=True),
        prefix + "mlp.b2": Tensor(np.zeros(d_llm, dtype=np.float32), requires_grad=True),
    }


def vision_project(f_vlm: Tensor, proj: VisionProjection) -> Tensor:
    """Project frozen visual tokens (N_v, d_vis) into (N_v, d_llm)."""
    n_v, d = f_vlm.shape
    if d != proj.d_vis:
        raise ValueError(f"token dim {d} != projection d_vis {proj.d_vis}")
    x = add(f_vlm, Tensor(sinusoidal_posenc(n_v, d)))
    x = conv1d(x, proj.conv_kernel, proj.conv_bias)
    h = gelu(add(matmul(x, proj.mlp_w1), proj.mlp_b1))
    return add(matmul(h, proj.mlp_w2), proj.mlp_b2)

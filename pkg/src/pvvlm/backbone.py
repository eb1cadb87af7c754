"""Frozen toy backbones behind the stable encoder interface.

Both encoders are seeded pre-norm transformers whose weights never receive
gradients; an adapter for real pretrained weights would satisfy the same two
entry points (encode_image, llm_forward). Gradients still flow *through*
llm_forward to the soft prompt and the vision projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import init_encoder_params, run_encoder, uniform_init
from .numerics import Tensor, add, concat, matmul
from .vision import sinusoidal_posenc


@dataclass
class FrozenEncoderConfig:
    seed: int = 0
    depth: int = 2
    dim: int = 64
    heads: int = 4
    patch: int = 8  # vision patch side

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


def init_frozen_vision(cfg: FrozenEncoderConfig, prefix: str = "vis.") -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 101])
    in_dim = 3 * cfg.patch * cfg.patch
    params = {
        prefix + "embed.w": Tensor(uniform_init(rng, (in_dim, cfg.dim), in_dim)),
        prefix + "embed.b": Tensor(np.zeros(cfg.dim, dtype=np.float32)),
    }
    params.update(init_encoder_params(rng, prefix, cfg.depth, cfg.dim, trainable=False))
    return params


def init_frozen_llm(cfg: FrozenEncoderConfig, prefix: str = "llm.") -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 202])
    return init_encoder_params(rng, prefix, cfg.depth, cfg.dim, trainable=False)


def init_text_table(cfg: FrozenEncoderConfig, vocab_size: int = 256, name: str = "text.table") -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 303])
    return {name: Tensor(uniform_init(rng, (vocab_size, cfg.dim), cfg.dim))}


def image_to_patches(img: np.ndarray, patch: int) -> np.ndarray:
    """(3, H, W) -> (N_v, 3*patch*patch), non-overlapping row-major patches."""
    c, h, w = img.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image extents {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(c, gh, patch, gw, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch * patch)


def encode_image(img: Tensor, cfg: FrozenEncoderConfig, params: dict[str, Tensor],
                 prefix: str = "vis.") -> Tensor:
    """Frozen visual tokens from a standardized (3, H, W) image.

    Patch flatten -> frozen linear embed -> sinusoidal positions -> frozen
    encoder. Output (N_v, dim) carries no gradient.
    """
    patches = Tensor(image_to_patches(img.data, cfg.patch))
    x = add(matmul(patches, params[prefix + "embed.w"]), params[prefix + "embed.b"])
    x = add(x, Tensor(sinusoidal_posenc(x.shape[0], cfg.dim)))
    return run_encoder(x, params, prefix, cfg.depth, cfg.heads)


def llm_forward(
    e_text: Tensor | None,
    e_img: Tensor | None,
    soft: Tensor | None,
    cfg: FrozenEncoderConfig,
    params: dict[str, Tensor],
    prefix: str = "llm.",
) -> Tensor:
    """Frozen text-backbone pass over [soft; text; image] token embeddings."""
    parts = [t for t in (soft, e_text, e_img) if t is not None and t.shape[0] > 0]
    if not parts:
        raise ValueError("llm_forward needs at least one nonempty token block")
    for t in parts:
        if t.shape[-1] != cfg.dim:
            raise ValueError(f"token dim {t.shape[-1]} != backbone dim {cfg.dim}")
    x = parts[0] if len(parts) == 1 else concat(parts, axis=0)
    x = add(x, Tensor(sinusoidal_posenc(x.shape[0], cfg.dim)))
    return run_encoder(x, params, prefix, cfg.depth, cfg.heads)

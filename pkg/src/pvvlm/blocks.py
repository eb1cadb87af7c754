"""Shared transformer building blocks.

Both the frozen toy backbones and the trainable temporal encoder use the
same pre-norm encoder block: LN -> multi-head self-attention -> residual,
LN -> GELU feed-forward (hidden 4*dim) -> residual. Parameters live in flat
name->Tensor maps keyed by a prefix, so a whole model serializes as one
dictionary.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .numerics import Tensor, add, gelu, layer_norm, matmul, reshape, softmax, transpose

LN_EPS = 1e-5


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """U(-1/sqrt(fan_in), +1/sqrt(fan_in)), float32."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_encoder_params(
    rng: np.random.Generator,
    prefix: str,
    depth: int,
    dim: int,
    trainable: bool,
) -> dict[str, Tensor]:
    """Parameters for a `depth`-layer pre-norm encoder under `prefix`."""
    params: dict[str, Tensor] = {}
    for i in range(depth):
        p = f"{prefix}layers.{i}."
        params[p + "ln1.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=trainable)
        params[p + "ln1.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=trainable)
        for name in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{name}"] = Tensor(uniform_init(rng, (dim, dim), dim), requires_grad=trainable)
        params[p + "ln2.g"] = Tensor(np.ones(dim, dtype=np.float32), requires_grad=trainable)
        params[p + "ln2.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=trainable)
        params[p + "ffn.w1"] = Tensor(uniform_init(rng, (dim, 4 * dim), dim), requires_grad=trainable)
        params[p + "ffn.b1"] = Tensor(np.zeros(4 * dim, dtype=np.float32), requires_grad=trainable)
        params[p + "ffn.w2"] = Tensor(uniform_init(rng, (4 * dim, dim), 4 * dim), requires_grad=trainable)
        params[p + "ffn.b2"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=trainable)
    return params


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    heads: int,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; returns (per-head output, weights).

    q_in: (N_q, d), kv_in: (N_kv, d). Output: (N_q, d) with heads already
    re-concatenated; weights: (heads, N_q, N_kv). The caller applies the
    output projection.
    """
    n_q, d = q_in.shape
    n_kv = kv_in.shape[0]
    if n_kv < 1:
        raise ValueError("attention needs at least one key/value token")
    if d % heads != 0:
        raise ValueError(f"dim {d} not divisible by {heads} heads")
    dk = d // heads
    q = matmul(q_in, wq)
    k = matmul(kv_in, wk)
    v = matmul(kv_in, wv)
    qh = transpose(reshape(q, (n_q, heads, dk)), (1, 0, 2))
    kh = transpose(reshape(k, (n_kv, heads, dk)), (1, 0, 2))
    vh = transpose(reshape(v, (n_kv, heads, dk)), (1, 0, 2))
    scores = matmul(qh, transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)  # (heads, N_q, dk)
    out = reshape(transpose(ctx, (1, 0, 2)), (n_q, d))
    return out, weights


def encoder_block(x: Tensor, params: Mapping[str, Tensor], prefix: str, heads: int) -> Tensor:
    """One pre-norm block: x + attn(LN(x)), then h + ffn(LN(h))."""
    h = layer_norm(x, params[prefix + "ln1.g"], params[prefix + "ln1.b"], LN_EPS)
    attn, _ = multi_head_attention(
        h, h, params[prefix + "attn.wq"], params[prefix + "attn.wk"], params[prefix + "attn.wv"], heads
    )
    x = add(x, matmul(attn, params[prefix + "attn.wo"]))
    h = layer_norm(x, params[prefix + "ln2.g"], params[prefix + "ln2.b"], LN_EPS)
    h = gelu(add(matmul(h, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    h = add(matmul(h, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])
    return add(x, h)


def run_encoder(x: Tensor, params: Mapping[str, Tensor], prefix: str, depth: int, heads: int) -> Tensor:
    for i in range(depth):
        x = encoder_block(x, params, f"{prefix}layers.{i}.", heads)
    return x

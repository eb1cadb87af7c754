"""Cross-modal fusion and full-forecaster assembly.

Temporal patch embeddings query the backbone's fused text+image tokens
through multi-head cross attention; a residual + layer norm and a flat
output head produce the normalized forecast. Ablation switches reroute the
same pipeline for the six study variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import encode_image, llm_forward
from .blocks import multi_head_attention, uniform_init
from .dataio import SampleRecord
from .model import AblationConfig, ModelDims, ModelParams
from .numerics import Tensor, add, layer_norm, matmul, mean, no_grad, reshape
from .prompt import PromptTemplate, compute_stats, embed_text, init_soft_prompt, render_prompt, tokenize
from .temporal import WindowNorm, denormalize, encode_temporal, init_temporal_params, normalize_window, patchify
from .vision import ImageNormStats, VisionProjection, bilinear_resize, init_vision_projection, normalize_standardize, vision_project

LN_EPS = 1e-5


def init_fusion_params(rng: np.random.Generator, d_llm: int, d_model: int,
                       with_temporal: bool, prefix: str = "fusion.") -> dict[str, Tensor]:
    params = {
        prefix + "llm.w": Tensor(uniform_init(rng, (d_llm, d_model), d_llm), requires_grad=True),
        prefix + "llm.b": Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True),
    }
    if with_temporal:
        params[prefix + "temporal.w"] = Tensor(uniform_init(rng, (d_model, d_model), d_model), requires_grad=True)
        params[prefix + "temporal.b"] = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
    for name in ("wq", "wk", "wv", "wo"):
        params[prefix + f"attn.{name}"] = Tensor(uniform_init(rng, (d_model, d_model), d_model), requires_grad=True)
    params[prefix + "attn.bo"] = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
    params[prefix + "ln.g"] = Tensor(np.ones(d_model, dtype=np.float32), requires_grad=True)
    params[prefix + "ln.b"] = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
    return params


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def project_modalities(e_llm: Tensor, e_temporal: Tensor, params: dict[str, Tensor],
                       prefix: str = "fusion.") -> tuple[Tensor, Tensor]:
    """Affine-map both token sets into the shared d_model space."""
    w_llm = params[prefix + "llm.w"]
    w_tmp = params[prefix + "temporal.w"]
    if e_llm.shape[-1] != w_llm.shape[0]:
        raise ValueError(f"e_llm dim {e_llm.shape[-1]} != {w_llm.shape[0]}")
    if e_temporal.shape[-1] != w_tmp.shape[0]:
        raise ValueError(f"e_temporal dim {e_temporal.shape[-1]} != {w_tmp.shape[0]}")
    return (
        _affine(e_llm, w_llm, params[prefix + "llm.b"]),
        _affine(e_temporal, w_tmp, params[prefix + "temporal.b"]),
    )


def cross_modal_attention(query_side: Tensor, kv_side: Tensor, params: dict[str, Tensor],
                          heads: int, prefix: str = "fusion.", return_weights: bool = False):
    """Multi-head attention with temporal queries over backbone keys/values."""
    if kv_side.shape[0] < 1:
        raise ValueError("cross-modal attention needs a nonempty kv side")
    out, weights = multi_head_attention(
        query_side, kv_side,
        params[prefix + "attn.wq"], params[prefix + "attn.wk"], params[prefix + "attn.wv"],
        heads,
    )
    out = add(matmul(out, params[prefix + "attn.wo"]), params[prefix + "attn.bo"])
    return (out, weights) if return_weights else out


def fuse(e_temporal_proj: Tensor, attn_out: Tensor, params: dict[str, Tensor],
         prefix: str = "fusion.") -> Tensor:
    """Residual skip then layer norm, per token."""
    if e_temporal_proj.shape != attn_out.shape:
        raise ValueError(f"shape mismatch {e_temporal_proj.shape} vs {attn_out.shape}")
    return layer_norm(add(e_temporal_proj, attn_out), params[prefix + "ln.g"], params[prefix + "ln.b"], LN_EPS)


def output_projection(e_fusion: Tensor, params: dict[str, Tensor], horizon_steps: int) -> Tensor:
    """Row-major flatten then a single affine map to the horizon length."""
    w, b = params["out.w"], params["out.b"]
    flat_size = int(np.prod(e_fusion.shape))
    if flat_size != w.shape[0]:
        raise ValueError(
            f"fusion token grid {e_fusion.shape} flattens to {flat_size}, "
            f"but the output layer expects {w.shape[0]}"
        )
    y = add(matmul(reshape(e_fusion, (1, flat_size)), w), b)
    if y.shape[1] != horizon_steps:
        raise ValueError(f"output layer produces {y.shape[1]} steps, expected {horizon_steps}")
    return reshape(y, (horizon_steps,))


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def build_model(dims: ModelDims, seed: int) -> ModelParams:
    """Initialize the partitioned parameter set for one variant."""
    abl = dims.ablation
    rng = np.random.default_rng([seed, 7])
    trainable: dict[str, Tensor] = {}
    frozen: dict[str, Tensor] = {}
    if abl.use_tam:
        trainable.update(init_temporal_params(rng, dims.patch_config()))
    if abl.use_vam:
        trainable.update(init_vision_projection(rng, dims.d_vis, dims.d_llm))
        frozen.update(init_frozen_vision_params(dims, seed))
    if abl.use_soft_prompt:
        trainable["pam.soft"] = init_soft_prompt(rng, dims.n_soft, dims.d_llm)
    if abl.use_pam:
        from .backbone import init_text_table

        frozen.update(init_text_table(dims.llm_config(seed)))
    if abl.uses_backbone:
        from .backbone import init_frozen_llm

        frozen.update(init_frozen_llm(dims.llm_config(seed)))
        trainable.update(init_fusion_params(rng, dims.d_llm, dims.d_model, with_temporal=abl.use_tam))
    flat_in = dims.patch_config().n_patches * dims.d_model if abl.use_tam else dims.d_model
    trainable["out.w"] = Tensor(uniform_init(rng, (flat_in, dims.horizon_steps), flat_in), requires_grad=True)
    trainable["out.b"] = Tensor(np.zeros(dims.horizon_steps, dtype=np.float32), requires_grad=True)
    return ModelParams(dims=dims, seed=seed, trainable=trainable, frozen=frozen)


def init_frozen_vision_params(dims: ModelDims, seed: int) -> dict[str, Tensor]:
    from .backbone import init_frozen_vision

    return init_frozen_vision(dims.vision_config(seed))


# ---------------------------------------------------------------------------
# sample preparation and the end-to-end forward pass
# ---------------------------------------------------------------------------

@dataclass
class PreparedSample:
    """Per-sample constants cached across epochs (all gradient-free)."""

    anchor_time: int
    input_window: np.ndarray  # raw kW (L,)
    target_kw: np.ndarray  # raw kW (H,)
    wn: WindowNorm
    target_norm: np.ndarray  # (H,) float32
    patches: np.ndarray | None  # (N_patch, patch_len) float32
    token_ids: np.ndarray | None  # (T,) int64
    f_vlm: np.ndarray | None  # (N_v, d_vis) float32, frozen encoder output


def prepare_sample(sample: SampleRecord, model: ModelParams, abl: AblationConfig | None = None,
                   template: PromptTemplate | None = None) -> PreparedSample:
    dims = model.dims
    abl = abl if abl is not None else dims.ablation
    if len(sample.input_window) != dims.input_len:
        raise ValueError(f"sample window length {len(sample.input_window)} != model input {dims.input_len}")
    norm, wn = normalize_window(sample.input_window)
    target_norm = ((sample.target - wn.mean) / wn.std).astype(np.float32)

    patches = patchify(norm, dims.patch_config()) if abl.use_tam else None

    token_ids = None
    if abl.use_pam:
        tmpl = template if template is not None else dims.template()
        stats = compute_stats(sample.input_window)
        text = render_prompt(stats, dims.horizon_steps, dims.input_len, tmpl)
        token_ids = tokenize(text)

    f_vlm = None
    if abl.use_vam:
        with no_grad():
            resized = bilinear_resize(sample.image, (dims.image_size, dims.image_size))
            std = normalize_standardize(resized, ImageNormStats(dims.img_mean, dims.img_std))
            f_vlm = encode_image(std, dims.vision_config(model.seed), model.merged).data

    return PreparedSample(
        anchor_time=sample.anchor_time,
        input_window=np.asarray(sample.input_window, dtype=np.float64),
        target_kw=np.asarray(sample.target, dtype=np.float64),
        wn=wn,
        target_norm=target_norm,
        patches=patches,
        token_ids=token_ids,
        f_vlm=f_vlm,
    )


def prepare_samples(samples: list[SampleRecord], model: ModelParams,
                    abl: AblationConfig | None = None) -> list[PreparedSample]:
    abl = abl if abl is not None else model.dims.ablation
    template = model.dims.template() if abl.use_pam else None
    return [prepare_sample(s, model, abl, template) for s in samples]


def forward_prepared(prep: PreparedSample, model: ModelParams, abl: AblationConfig | None = None,
                     trace: dict | None = None) -> Tensor:
    """Normalized forecast (horizon_steps,) with gradients to trainable parts."""
    dims = model.dims
    abl = abl if abl is not None else dims.ablation
    params = model.merged

    e_temporal = None
    if abl.use_tam:
        e_temporal = encode_temporal(Tensor(prep.patches), dims.patch_config(), params)

    e_llm = None
    if abl.uses_backbone:
        soft = params["pam.soft"] if abl.use_soft_prompt else None
        e_text = embed_text(prep.token_ids, params["text.table"]) if abl.use_pam else None
        e_img = None
        if abl.use_vam:
            e_img = vision_project(Tensor(prep.f_vlm), VisionProjection.from_params(params))
        e_llm = llm_forward(e_text, e_img, soft, dims.llm_config(model.seed), params)
        if trace is not None:
            trace["n_soft"] = 0 if soft is None else soft.shape[0]
            trace["n_text"] = 0 if e_text is None else e_text.shape[0]
            trace["n_img"] = 0 if e_img is None else e_img.shape[0]
            trace["n_kv"] = e_llm.shape[0]

    if e_llm is None:
        e_fused = e_temporal  # temporal-only: straight to the output head
    else:
        e_llm_p = _affine(e_llm, params["fusion.llm.w"], params["fusion.llm.b"])
        if abl.use_tam:
            q_side = _affine(e_temporal, params["fusion.temporal.w"], params["fusion.temporal.b"])
        else:
            # no temporal queries: mean-pool the backbone tokens into one query
            q_side = reshape(mean(e_llm_p, axis=0), (1, dims.d_model))
        attn_out = cross_modal_attention(q_side, e_llm_p, params, heads=dims.fusion_heads)
        e_fused = fuse(q_side, attn_out, params)
        if trace is not None:
            trace["n_query"] = q_side.shape[0]

    return output_projection(e_fused, params, dims.horizon_steps)


def forward(sample: SampleRecord, model: ModelParams, abl: AblationConfig | None = None) -> np.ndarray:
    """kW forecast for one sample (inference path, no graph)."""
    abl = abl if abl is not None else model.dims.ablation
    prep = prepare_sample(sample, model, abl)
    with no_grad():
        pred_norm = forward_prepared(prep, model, abl)
    return denormalize(pred_norm.data, prep.wn)

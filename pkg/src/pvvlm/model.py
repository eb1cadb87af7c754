"""Model-level data types: dimension manifest, ablation switches, parameters."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from .backbone import FrozenEncoderConfig
from .numerics import Tensor
from .prompt import PromptTemplate
from .temporal import PatchConfig


@dataclass(frozen=True)
class AblationConfig:
    use_tam: bool = True
    use_pam: bool = True
    use_vam: bool = True
    use_soft_prompt: bool = True

    def __post_init__(self):
        if not (self.use_tam or self.use_pam or self.use_vam):
            raise ValueError("at least one of tam/pam/vam must be enabled")

    @property
    def uses_backbone(self) -> bool:
        return self.use_pam or self.use_vam or self.use_soft_prompt


# Soft prompts belong to the prompt path, so they ride along with PAM in
# every combined variant and are stripped only in the dedicated row.
VARIANTS: dict[str, AblationConfig] = {
    "Proposed": AblationConfig(True, True, True, True),
    "Proposed-noSoftPrompt": AblationConfig(True, True, True, False),
    "TAM": AblationConfig(True, False, False, False),
    "TAM-PAM": AblationConfig(True, True, False, True),
    "TAM-VAM": AblationConfig(True, False, True, False),
    "PAM-VAM": AblationConfig(False, True, True, True),
}


def variant_config(name: str) -> AblationConfig:
    for key, abl in VARIANTS.items():
        if key.lower() == name.lower():
            return abl
    raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")


def variant_name(abl: AblationConfig) -> str:
    for key, cfg in VARIANTS.items():
        if cfg == abl:
            return key
    return "custom"


@dataclass
class ModelDims:
    """Everything needed to rebuild a model skeleton and reproduce forecasts."""

    horizon_steps: int = 10
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
    image_size: int = 64
    d_llm: int = 64
    llm_depth: int = 2
    llm_heads: int = 4
    n_soft: int = 8
    variant: str = "Proposed"
    template_text: str = ""
    img_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    img_std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not self.template_text:
            self.template_text = PromptTemplate.default().to_text()
        variant_config(self.variant)  # validates the name
        if self.d_model % self.fusion_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by fusion_heads {self.fusion_heads}")

    @property
    def input_len(self) -> int:
        return 2 * self.horizon_steps

    @property
    def horizon_minutes(self) -> int:
        return 2 * self.horizon_steps

    @property
    def n_image_tokens(self) -> int:
        return (self.image_size // self.vis_patch) ** 2

    @property
    def ablation(self) -> AblationConfig:
        return variant_config(self.variant)

    def patch_config(self) -> PatchConfig:
        return PatchConfig(
            input_len=self.input_len,
            patch_len=self.patch_len,
            stride=self.stride,
            d_model=self.d_model,
            layers=self.tam_layers,
            heads=self.tam_heads,
        )

    def vision_config(self, seed: int) -> FrozenEncoderConfig:
        return FrozenEncoderConfig(seed=seed, depth=self.vis_depth, dim=self.d_vis,
                                   heads=self.vis_heads, patch=self.vis_patch)

    def llm_config(self, seed: int) -> FrozenEncoderConfig:
        return FrozenEncoderConfig(seed=seed, depth=self.llm_depth, dim=self.d_llm,
                                   heads=self.llm_heads)

    def template(self) -> PromptTemplate:
        return PromptTemplate.from_text(self.template_text)

    def to_manifest(self) -> dict:
        d = asdict(self)
        d["img_mean"] = list(self.img_mean)
        d["img_std"] = list(self.img_std)
        return d

    @classmethod
    def from_manifest(cls, manifest: dict) -> "ModelDims":
        d = dict(manifest)
        d["img_mean"] = tuple(d["img_mean"])
        d["img_std"] = tuple(d["img_std"])
        return cls(**d)


@dataclass
class ModelParams:
    """Partitioned parameter set: trainable adapters vs frozen backbones."""

    dims: ModelDims
    seed: int
    trainable: dict[str, Tensor]
    frozen: dict[str, Tensor]
    merged: dict[str, Tensor] = field(init=False)

    def __post_init__(self):
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise ValueError(f"trainable/frozen name overlap: {sorted(overlap)}")
        for name, t in self.trainable.items():
            if not t.requires_grad:
                raise ValueError(f"trainable tensor {name} must require grad")
        for name, t in self.frozen.items():
            if t.requires_grad:
                raise ValueError(f"frozen tensor {name} must not require grad")
        self.merged = {**self.trainable, **self.frozen}

    def zero_grad(self) -> None:
        for t in self.trainable.values():
            t.zero_grad()

    def all_tensors(self) -> dict[str, Tensor]:
        return self.merged

    def snapshot(self) -> dict[str, np.ndarray]:
        """Copy of every tensor's payload (used for best-epoch checkpoints)."""
        return {name: t.data.copy() for name, t in self.merged.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        if set(snap) != set(self.merged):
            missing = set(self.merged) ^ set(snap)
            raise ValueError(f"snapshot name set mismatch: {sorted(missing)}")
        for name, arr in snap.items():
            t = self.merged[name]
            if t.data.shape != arr.shape:
                raise ValueError(f"snapshot shape mismatch for {name}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype).copy()

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.merged):
            h.update(name.encode("utf-8"))
            h.update(self.merged[name].data.astype("<f4").tobytes())
        return h.hexdigest()

import dataclasses

import numpy as np
import pytest

from pvvlm.dataio import build_samples, resample_2min, split_chronological
from pvvlm.model import ModelDims
from pvvlm.prompt import PromptTemplate
from pvvlm.synthgen import SceneConfig, render_and_power

# short template keeps byte-token counts small so tests stay fast
MICRO_TEMPLATE = PromptTemplate(
    "PV power kW.",
    "Sky frame.",
    "Task: forecast the next ⟨Horizon⟩ steps given the previous ⟨Input Size⟩ steps.",
    "Min ⟨min_val⟩ max ⟨max_val⟩ median ⟨median_val⟩. "
    "The overall trend is ⟨trend⟩. The top five lags are ⟨lag_val⟩.",
)


def tiny_dims(**overrides) -> ModelDims:
    base = dict(
        horizon_steps=10,
        patch_len=8,
        stride=4,
        d_model=8,
        tam_layers=1,
        tam_heads=2,
        fusion_heads=2,
        d_vis=8,
        vis_depth=1,
        vis_heads=2,
        vis_patch=8,
        image_size=16,
        d_llm=8,
        llm_depth=1,
        llm_heads=2,
        n_soft=2,
        template_text=MICRO_TEMPLATE.to_text(),
    )
    base.update(overrides)
    return ModelDims(**base)


def tiny_scene(seed=0, **overrides) -> SceneConfig:
    base = dict(
        image_size=16,
        sun_radius=2.0,
        cloud_radius=3.0,
        cloud_velocity=0.15,
        attenuation=0.7,
        day_length_steps=240,
        capacity_kw=30.0,
        noise_std=0.3,
        seed=seed,
    )
    base.update(overrides)
    return SceneConfig(**base)


@pytest.fixture(scope="session")
def tiny_day():
    """(images, 2-min series) for one synthetic day at 16x16."""
    images, series = render_and_power(0, tiny_scene())
    return images, resample_2min(series)


@pytest.fixture(scope="session")
def tiny_samples(tiny_day):
    images, series = tiny_day
    return build_samples(series, images, horizon_steps=10)


@pytest.fixture(scope="session")
def tiny_split(tiny_samples):
    return split_chronological(tiny_samples)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Small on-disk dataset in the CLI layout (2 days, 16x16 frames)."""
    from pvvlm.synthgen import write_dataset

    root = tmp_path_factory.mktemp("synthdata")
    write_dataset(2, tiny_scene(seed=5), root)
    return root

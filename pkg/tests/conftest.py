"""Shared tiny fixtures: a coarse scene and small template/network configs
keep the train/eval/cli tests fast on one CPU core."""

import numpy as np
import pytest

from bedmesh.body_model import make_toy_template
from bedmesh.data import ParamRanges, SceneConfig, ShiftProfile, generate_pseudo_real, generate_synthetic
from bedmesh.network import DenoiserConfig
from bedmesh.train import TrainConfig


@pytest.fixture(scope="session")
def tiny_templates():
    return make_toy_template(48, seed=0)


@pytest.fixture(scope="session")
def tiny_scene():
    return SceneConfig(image_size=(16, 16), pixel_pitch=0.125)


@pytest.fixture(scope="session")
def tiny_ranges():
    return ParamRanges()


@pytest.fixture(scope="session")
def tiny_net_config():
    return DenoiserConfig(image_size=(16, 16), n_down_blocks=2,
                          n_attention_blocks=1, base_channels=4, latent_dim=8)


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(batch_size=4, steps_total=6, epochs=2, seed=0)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_scene, tiny_ranges, tiny_templates):
    return generate_synthetic(12, seed=0, scene=tiny_scene, ranges=tiny_ranges,
                              templates=tiny_templates)


@pytest.fixture(scope="session")
def tiny_real_dataset(tiny_scene, tiny_ranges, tiny_templates):
    return generate_pseudo_real(
        8, seed=1, scene=tiny_scene, ranges=tiny_ranges, templates=tiny_templates,
        profile=ShiftProfile(), shift_seed=5, participants=[0, 1],
    )

"""Shared tiny-scale fixtures: small synthetic data and narrow models."""

from __future__ import annotations

import pytest
import torch

from cris.backbones import BackboneConfig, build_backbone
from cris.data import split_dataset, synth_shapes
from cris.refinement import RefinementConfig, build_refinement, compose


@pytest.fixture(scope="session")
def synth32():
    return synth_shapes(16, (32, 32), seed=0)


@pytest.fixture(scope="session")
def splits32(synth32):
    # 16 samples -> 11 / 2 / 3
    return split_dataset(synth32)


@pytest.fixture
def make_backbone():
    def make(kind: str = "unet", base_channels: int = 4, depth: int = 2, seed: int = 0):
        return build_backbone(BackboneConfig(kind, base_channels, depth, seed))

    return make


@pytest.fixture
def make_full_model(make_backbone):
    def make(kind: str = "unet", dropout_p: float = 0.01, seed: int = 0):
        refinement = build_refinement(
            RefinementConfig(expand_channels=4, kernel_sizes=(5, 3), dropout_p=dropout_p, seed=seed)
        )
        return compose(make_backbone(kind, seed=seed), refinement)

    return make


@pytest.fixture(autouse=True)
def _single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)

"""Shared fixtures: a tiny procedural dataset and a quickly trained field.

The expensive end-to-end experiment lives in test_acceptance.py behind its
own session fixture; everything here is sized to keep the unit suite fast.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from geomark.datasets import generate_procedural_scene
from geomark.field import FieldConfig, RenderConfig, make_backend
from geomark.trainer import TrainConfig, train_stage1


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six 32x32 views of the seed-0 procedural scene (5 train / 1 test)."""
    return generate_procedural_scene(0, n_views=6, resolution=32, ssaa=2)


@pytest.fixture(scope="session")
def render_cfg():
    return RenderConfig(n_samples=32)


@pytest.fixture(scope="session")
def fitted_mlp(tiny_dataset, render_cfg):
    """A briefly fitted MLP field: rough but far from random, shared read-only."""
    torch.manual_seed(7)
    backend = make_backend(FieldConfig())
    cfg = TrainConfig(stage1_steps=300, eval_interval=300, patch_size=32)
    train_stage1(tiny_dataset, backend, cfg, render_cfg, np.random.default_rng(7))
    for p in backend.parameters():
        p.requires_grad_(False)
        p.grad = None
    return backend


@pytest.fixture(scope="session")
def mlp_caches(fitted_mlp, tiny_dataset, render_cfg):
    """Frozen-field view caches for every view, shared read-only."""
    from geomark.trainer import ViewCache

    return {
        i: ViewCache(fitted_mlp, tiny_dataset.poses[i], render_cfg)
        for i in range(len(tiny_dataset.poses))
    }

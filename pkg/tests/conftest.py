"""Shared fixtures: tiny model specs and a small synthetic corpus.

Heavier artifacts (the desk-scale training run used by the acceptance suite)
are cached on disk under ``.artifacts/`` keyed by their configuration so
repeated test runs reuse them; see tests/test_acceptance.py.
"""

import numpy as np
import pytest
import torch

from pastiche.backbone import UNetSpec, freeze, init_backbone
from pastiche.datasetgen import build_synthetic_corpus
from pastiche.diffusion import linear_schedule
from pastiche.harmonizer import init_from_backbone
from pastiche.imaging import AlphaMatte, BBox, RasterImage


MINI_SPEC = UNetSpec(
    base_width=8,
    channel_mults=(1, 2),
    blocks_per_level=1,
    time_dim=16,
    text_dim=16,
    vocab_size=256,
    max_tokens=16,
)


@pytest.fixture(scope="session")
def mini_spec():
    return MINI_SPEC


@pytest.fixture(scope="session")
def mini_schedule():
    return linear_schedule(20)


@pytest.fixture(scope="session")
def mini_backbone():
    return init_backbone(MINI_SPEC, seed=7)


@pytest.fixture(scope="session")
def frozen_mini_backbone():
    # A fresh denoiser has a zero-initialized output head, which blocks every
    # upstream gradient; nudge it (as pretraining would) before freezing so
    # training/gradient tests see realistic flow.
    params = init_backbone(MINI_SPEC, seed=11)
    gen = torch.Generator().manual_seed(99)
    with torch.no_grad():
        head = params.module.out_conv
        head.weight.add_(torch.randn(head.weight.shape, generator=gen) * 0.05)
        head.bias.add_(torch.randn(head.bias.shape, generator=gen) * 0.05)
    return freeze(params)


@pytest.fixture()
def mini_harmonizer(frozen_mini_backbone):
    return init_from_backbone(frozen_mini_backbone, seed=3)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny-corpus")
    return build_synthetic_corpus(n=8, size=32, seed=123, out_dir=str(root))


@pytest.fixture()
def checker_scene():
    rng = np.random.default_rng(0)
    data = rng.uniform(0.2, 0.8, size=(32, 32, 3)).astype(np.float32)
    return RasterImage(data)


def solid_subject_image(size=32, box=None, value=(1.0, 0.2, 0.2)):
    """Uniform background with one solid rectangle subject and its exact matte."""
    if box is None:
        box = BBox(size // 4, size // 3, max(2, size // 3), max(2, size // 4))
    img = np.full((size, size, 3), 0.1, dtype=np.float32)
    img[box.y : box.y2, box.x : box.x2] = value
    matte = np.zeros((size, size), dtype=np.float32)
    matte[box.y : box.y2, box.x : box.x2] = 1.0
    return RasterImage(img), AlphaMatte(matte), box

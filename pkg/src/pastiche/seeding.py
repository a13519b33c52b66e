"""Deterministic seed derivation shared by dataset, training, and eval code."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(root: int, *tags) -> int:
    """Stable 63-bit child seed from a root seed and a tag path.

    Hash-based so results do not depend on platform, process, or call order.
    """
    text = repr((int(root),) + tuple(tags)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(root: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *tags))


def torch_rng(root: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(root, *tags))
    return gen

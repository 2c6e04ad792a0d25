"""Seeded toy fixtures shared by the tests, the scripts and ``magedit toy-demo``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from magedit.attention import EditMask
from magedit.backend import ToyDenoiser
from magedit.prompts import PromptPair, align_prompts

SOURCE_PROMPT = "a green sofa in a room"
TARGET_PROMPT = "a blue sofa in a room"


def make_toy_image(size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """A 'room' gradient with a green 'sofa' block, plus the sofa's mask."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    image = np.stack([180 - 60 * yy, 170 - 40 * xx, 150 + 30 * yy * xx], axis=2)
    mask = np.zeros((size, size), dtype=bool)
    mask[size // 2 : size * 13 // 16, size * 3 // 16 : size * 13 // 16] = True
    image[mask] = (40, 150, 60)
    return np.clip(image, 0, 255).astype(np.uint8), mask


@dataclass
class ToyFixture:
    backend: ToyDenoiser
    z0: torch.Tensor
    pair: PromptPair
    mask: EditMask


def random_latent(seed: int, shape=(4, 16, 16)) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64) * 2 - 1


def random_mask(rng: np.random.Generator, size: int = 128, min_side: int = 24) -> np.ndarray:
    """Axis-aligned rectangle covering part of the image, never empty or full."""
    h = int(rng.integers(min_side, size // 2 + 1))
    w = int(rng.integers(min_side, size // 2 + 1))
    r = int(rng.integers(0, size - h + 1))
    c = int(rng.integers(0, size - w + 1))
    m = np.zeros((size, size), dtype=bool)
    m[r : r + h, c : c + w] = True
    return m


def toy_fixture(
    seed: int,
    source: str = SOURCE_PROMPT,
    target: str = TARGET_PROMPT,
    image_mask: np.ndarray | None = None,
    **backend_kw,
) -> ToyFixture:
    """Backend, latent, aligned prompts and mask, all derived from ``seed``."""
    backend = ToyDenoiser(seed=seed, **backend_kw)
    if image_mask is None:
        image_mask = random_mask(np.random.default_rng([seed, 7]))
    pair = align_prompts(backend.tokenize(source), backend.tokenize(target))
    return ToyFixture(backend, random_latent(seed), pair, EditMask.from_image_mask(image_mask))

"""Cross-attention bundles at the working resolution: capture, injection, re-weighting, masks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from magedit.errors import ContractError, EmptyEditRegion

ATTN_SIZE = (16, 16)

RECONSTRUCTION = "reconstruction"
EDITING = "editing"
AUXILIARY_NEGATIVE = "auxiliary_negative"
BRANCHES = (RECONSTRUCTION, EDITING, AUXILIARY_NEGATIVE)


@dataclass(frozen=True)
class AttentionBundle:
    """Per-token maps stacked as a ``(num_tokens, H, W)`` tensor, indexed by prompt position."""

    maps: torch.Tensor
    branch: str = EDITING
    timestep: int = 0
    layer_count: int = 1
    head_count: int = 1

    def __post_init__(self):
        if self.maps.dim() != 3:
            raise ContractError("attention maps must be (tokens, H, W)")
        if self.branch not in BRANCHES:
            raise ContractError(f"unknown branch {self.branch!r}")

    def __len__(self):
        return self.maps.shape[0]

    def __getitem__(self, position: int) -> torch.Tensor:
        return self.maps[position]

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.maps.shape[1:])

    def row_sums(self) -> torch.Tensor:
        return self.maps.sum(dim=0)

    def detach(self) -> "AttentionBundle":
        return AttentionBundle(
            self.maps.detach(), self.branch, self.timestep, self.layer_count, self.head_count
        )

    def with_maps(self, maps: torch.Tensor) -> "AttentionBundle":
        return AttentionBundle(maps, self.branch, self.timestep, self.layer_count, self.head_count)


def aggregate(
    raw_layer_maps: Sequence[torch.Tensor],
    timestep: int = 0,
    branch: str = EDITING,
    size: tuple[int, int] = ATTN_SIZE,
) -> AttentionBundle:
    """Average post-softmax probabilities over heads, then over layers.

    Each layer tensor is ``(heads, H*W, tokens)`` or ``(heads, H, W, tokens)``.
    """
    if not raw_layer_maps:
        raise ContractError("no attention layers to aggregate")
    h, w = size
    per_layer = []
    heads = None
    for layer in raw_layer_maps:
        if layer.dim() == 4:
            if tuple(layer.shape[1:3]) != (h, w):
                raise ContractError(f"layer at {tuple(layer.shape[1:3])}, expected {size}")
            layer = layer.reshape(layer.shape[0], h * w, layer.shape[-1])
        elif layer.dim() != 3 or layer.shape[1] != h * w:
            raise ContractError(f"layer of shape {tuple(layer.shape)} is not at {size}")
        heads = layer.shape[0]
        per_layer.append(layer.mean(dim=0))
    mean = torch.stack(per_layer).mean(dim=0)  # (H*W, tokens)
    maps = mean.transpose(0, 1).reshape(-1, h, w)
    return AttentionBundle(maps, branch, timestep, len(raw_layer_maps), heads)


def inject(recon: AttentionBundle, edit: AttentionBundle, pair) -> AttentionBundle:
    """Mixed maps: aligned reconstruction maps at common positions, edit maps elsewhere.

    ``pair`` is anything with a ``common`` list of ``(source_pos, target_pos)``;
    a :class:`~magedit.prompts.PromptPair` or a negative auxiliary prompt.
    Reconstruction maps are detached, so gradients only reach the edit maps.
    """
    common = list(pair.common)
    if hasattr(pair, "target") and len(edit) != len(pair.target):
        raise ContractError("edit bundle does not cover the target prompt")
    if hasattr(pair, "new_target"):
        covered = {tp for _, tp in common} | set(pair.new_target)
        if covered != set(range(len(edit))):
            raise ContractError("target position is neither common nor new")
    if not common:
        return edit
    src = [s for s, _ in common]
    tgt = [t for _, t in common]
    if max(src) >= len(recon) or max(tgt) >= len(edit):
        raise ContractError("alignment refers to a position outside the bundles")
    maps = edit.maps.clone()
    maps[tgt] = recon.maps[src].detach().to(maps.dtype)
    return edit.with_maps(maps)


def reweight(bundle: AttentionBundle, position: int, scale: float) -> AttentionBundle:
    if not 0 <= position < len(bundle):
        raise ContractError(f"no token at position {position}")
    if scale <= 0:
        raise ContractError("scale must be positive")
    factor = torch.ones(len(bundle), 1, 1, dtype=bundle.maps.dtype)
    factor[position] = scale
    return bundle.with_maps(bundle.maps * factor)


def downsample_mask(image_mask: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Max-pool a binary mask: an output cell is on iff any pixel it covers is on."""
    m = np.asarray(image_mask).astype(bool)
    if m.ndim != 2:
        raise ContractError("mask must be a 2-D raster")
    H, W = m.shape
    h, w = target_size
    if h > H or w > W or h < 1 or w < 1:
        raise ContractError(f"cannot downsample {m.shape} to {target_size}")
    if H % h == 0 and W % w == 0:
        return m.reshape(h, H // h, w, W // w).any(axis=(1, 3))
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        r0, r1 = (i * H) // h, -((-(i + 1) * H) // h)
        for j in range(w):
            c0, c1 = (j * W) // w, -((-(j + 1) * W) // w)
            out[i, j] = m[r0:r1, c0:c1].any()
    return out


@dataclass(frozen=True)
class EditMask:
    image_mask: np.ndarray
    attn_mask: np.ndarray
    latent_mask: np.ndarray

    @property
    def area(self) -> int:
        return int(self.attn_mask.sum())

    @classmethod
    def from_image_mask(
        cls,
        image_mask: np.ndarray,
        latent_size: tuple[int, int] = (16, 16),
        attn_size: tuple[int, int] = ATTN_SIZE,
    ) -> "EditMask":
        image_mask = np.asarray(image_mask).astype(bool)
        attn = downsample_mask(image_mask, attn_size)
        latent = downsample_mask(image_mask, latent_size)
        if not attn.any() or not latent.any():
            raise EmptyEditRegion("edit mask is empty after downsampling")
        return cls(image_mask, attn, latent)

    def attn_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.attn_mask, dtype=dtype)

    def latent_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.latent_mask, dtype=torch.bool)


def in_mask_mean(bundle: AttentionBundle, positions: Sequence[int], mask: EditMask) -> float:
    """Mean attention of the given tokens over the attention-resolution mask."""
    m = mask.attn_tensor(bundle.maps.dtype)
    vals = [float((bundle.maps[p].detach() * m).sum() / m.sum()) for p in positions]
    return sum(vals) / len(vals)


def in_out_ratio(bundle: AttentionBundle, positions: Sequence[int], mask: EditMask) -> float:
    """Mean in-mask attention over mean out-of-mask attention."""
    m = mask.attn_tensor(bundle.maps.dtype)
    inside = outside = 0.0
    for p in positions:
        a = bundle.maps[p].detach()
        inside += float((a * m).sum() / m.sum())
        outside += float((a * (1 - m)).sum() / max(float((1 - m).sum()), 1.0))
    return inside / max(outside, 1e-12)

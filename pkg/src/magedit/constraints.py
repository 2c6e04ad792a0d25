"""Mask-based attention constraints and their combinations.

Loss functions take injected bundles and return 0-d tensors so they can sit
inside an autograd graph; call ``float()`` on them for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from magedit.attention import AttentionBundle, EditMask
from magedit.errors import ConfigError

EPS = 1e-8  # floor for ratio denominators, only active when attention mass vanishes

TOKEN_RATIO = "token_ratio"
SPATIAL_RATIO = "spatial_ratio"
KIND_ALIASES = {"tr": TOKEN_RATIO, "sr": SPATIAL_RATIO, TOKEN_RATIO: TOKEN_RATIO, SPATIAL_RATIO: SPATIAL_RATIO}


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str = SPATIAL_RATIO
    lambda_sr: float = 3.0
    lambda_p: float = 2.5
    lambda_ng: float = 5.5
    per_prompt_weights: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KIND_ALIASES:
            raise ConfigError(f"unknown constraint kind {self.kind!r}")
        object.__setattr__(self, "kind", KIND_ALIASES[self.kind])
        object.__setattr__(self, "per_prompt_weights", tuple(self.per_prompt_weights))
        if self.lambda_sr <= 0:
            raise ConfigError("lambda_sr must be positive")
        if self.per_prompt_weights:
            check_weights(self.per_prompt_weights)


@dataclass
class ConstraintValue:
    total: float
    per_group: list[float] = field(default_factory=list)
    per_token: dict[int, float] = field(default_factory=dict)
    negative: float | None = None
    in_mask_attention_mean: float | None = None


def check_weights(weights: Sequence[float]) -> None:
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"prompt weights {list(weights)} do not sum to 1")


def _mask(mask, like: torch.Tensor) -> torch.Tensor:
    m = mask.attn_mask if isinstance(mask, EditMask) else mask
    return torch.as_tensor(m, dtype=like.dtype)


def token_ratio_loss(
    bundle: AttentionBundle, new_pos: int, common_pos: Sequence[int], mask
) -> torch.Tensor:
    """Squared shortfall of the new token's in-mask share against the common tokens."""
    a = bundle.maps[new_pos]
    m = _mask(mask, a)
    common = bundle.maps[list(common_pos)].sum(dim=0) if len(common_pos) else torch.zeros_like(a)
    ratio = a / (a + common).clamp_min(EPS)
    share = (m * ratio).sum() / m.sum()
    return (1.0 - share) ** 2


def spatial_ratio_value(r, lambda_sr: float):
    return lambda_sr * (1.0 - r) - r


def spatial_ratio_loss(
    bundle: AttentionBundle, new_pos: int, mask, lambda_sr: float = 3.0
) -> torch.Tensor:
    """Penalise the new token's attention mass outside the mask, reward it inside."""
    a = bundle.maps[new_pos]
    m = _mask(mask, a)
    r = (m * a).sum() / a.sum().clamp_min(EPS)
    return spatial_ratio_value(r, lambda_sr)


def combine_with_negative(positive, negative, lambda_p: float = 2.5, lambda_ng: float = 5.5):
    return lambda_p * positive - lambda_ng * negative


def combine_multi_prompt(losses: Sequence, weights: Sequence[float]):
    if len(losses) != len(weights):
        raise ConfigError("need one weight per loss")
    check_weights(weights)
    total = weights[0] * losses[0]
    for w, loss in zip(weights[1:], losses[1:]):
        total = total + w * loss
    return total


def token_loss(
    spec: ConstraintSpec,
    bundle: AttentionBundle,
    position: int,
    common_pos: Sequence[int],
    mask,
) -> torch.Tensor:
    if spec.kind == TOKEN_RATIO:
        return token_ratio_loss(bundle, position, common_pos, mask)
    return spatial_ratio_loss(bundle, position, mask, spec.lambda_sr)


def phrase_loss(spec, bundle, positions, common_pos, mask) -> torch.Tensor:
    """Average of the per-token losses of a multi-token phrase."""
    losses = [token_loss(spec, bundle, p, common_pos, mask) for p in positions]
    return sum(losses[1:], losses[0]) / len(losses)


def total_loss(
    spec: ConstraintSpec,
    bundle: AttentionBundle,
    pair,
    mask,
    negative_bundles: Sequence[AttentionBundle] = (),
):
    """Full guidance objective on an injected bundle.

    Returns ``(loss_tensor, per_group_losses)``. Negative phrases, when present,
    enter once through the positive/negative balance after the per-group sum.
    """
    common = pair.common_target_positions
    per_group = [phrase_loss(spec, bundle, g, common, mask) for g in pair.groups]
    weights = spec.per_prompt_weights or pair.weights
    loss = combine_multi_prompt(per_group, weights)
    if negative_bundles:
        neg = [
            phrase_loss(spec, nb, n.positions, [tp for _, tp in n.common], mask)
            for n, nb in zip(pair.negatives, negative_bundles)
        ]
        loss = combine_with_negative(
            loss, sum(neg[1:], neg[0]) / len(neg), spec.lambda_p, spec.lambda_ng
        )
    return loss, per_group

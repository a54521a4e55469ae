"""Composite training objective: classification plus edge and region terms
on the fused foreground map and on each per-token map.

The edge and region formulations are pluggable strategies; the defaults
align map edges with image edges and discourage both full-image activation
and everywhere-uncertain maps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .errors import InputError


@dataclass(frozen=True)
class LossWeights:
    """Weights of the map-loss terms: mu on the fused map, lam per token map."""

    mu: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise InputError(f"loss weights must be >= 0, got mu={self.mu} lam={self.lam}")


def classification_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """Softmax cross-entropy; accepts (C,) with an int label or batched input."""
    if logits.dim() == 1:
        logits = logits[None]
    target = torch.as_tensor(label, dtype=torch.long, device=logits.device).reshape(-1)
    num_classes = logits.shape[-1]
    if target.min() < 0 or target.max() >= num_classes:
        raise InputError(f"label out of range [0, {num_classes})")
    return F.cross_entropy(logits, target)


def _pair_grads(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Forward differences along the last two axes."""
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def edge_loss(fg_map: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Penalize map gradients that sit on flat image regions.

    Mean of |grad map| * exp(-|grad image|) per direction, with the image
    reduced to grayscale and resized to the map grid. Constant maps score 0.
    """
    if fg_map.dim() == 2:
        fg_map = fg_map[None]
    if image.dim() == 3:
        image = image[None]
    gray = image.mean(dim=1, keepdim=True)
    gray = F.interpolate(gray, size=fg_map.shape[-2:], mode="bilinear", align_corners=False)
    gray = gray[:, 0]
    mdx, mdy = _pair_grads(fg_map)
    gdx, gdy = _pair_grads(gray)
    lx = (mdx.abs() * torch.exp(-gdx.abs())).mean()
    ly = (mdy.abs() * torch.exp(-gdy.abs())).mean()
    return 0.5 * (lx + ly)


def region_loss(fg_map: torch.Tensor, alpha: float = 1.0, beta: float = 1.0) -> torch.Tensor:
    """Area and uncertainty prior: alpha * mean(m) + beta * mean(min(m, 1-m))."""
    area = fg_map.mean()
    uncertainty = torch.minimum(fg_map, 1.0 - fg_map).mean()
    return alpha * area + beta * uncertainty


@dataclass
class LossBreakdown:
    """All objective components; `total` combines them with the given weights."""

    cls: torch.Tensor
    edge_b: torch.Tensor
    region_b: torch.Tensor
    edge_l: list[torch.Tensor]
    region_l: list[torch.Tensor]
    weights: LossWeights
    total: torch.Tensor

    def to_record(self) -> dict:
        """Plain-float record; `total` is recomputed from the logged floats so
        the combination identity can be re-derived exactly from the record."""
        cls = float(self.cls)
        edge_b, region_b = float(self.edge_b), float(self.region_b)
        edge_l = [float(v) for v in self.edge_l]
        region_l = [float(v) for v in self.region_l]
        return {
            "cls": cls,
            "edge_b": edge_b,
            "region_b": region_b,
            "edge_l": edge_l,
            "region_l": region_l,
            "mu": self.weights.mu,
            "lambda": self.weights.lam,
            "total": combine_terms(cls, edge_b, region_b, edge_l, region_l, self.weights),
        }


def combine_terms(cls, edge_b, region_b, edge_l: Sequence, region_l: Sequence, weights: LossWeights):
    """cls + mu*(edge_b + region_b) + lam * sum_i(edge_l[i] + region_l[i]).

    Works on tensors and on plain floats; the float path is the one logged
    records are checked against.
    """
    token_sum = None
    for e, r in zip(edge_l, region_l):
        term = e + r
        token_sum = term if token_sum is None else token_sum + term
    total = cls + weights.mu * (edge_b + region_b)
    if token_sum is not None:
        total = total + weights.lam * token_sum
    return total


def total_loss(
    cls: torch.Tensor,
    edge_b: torch.Tensor,
    region_b: torch.Tensor,
    edge_l: Sequence[torch.Tensor],
    region_l: Sequence[torch.Tensor],
    weights: LossWeights,
) -> LossBreakdown:
    """Assemble the weighted objective from precomputed components."""
    if len(edge_l) != len(region_l):
        raise InputError("edge_l and region_l must align per global token")
    return LossBreakdown(
        cls=cls,
        edge_b=edge_b,
        region_b=region_b,
        edge_l=list(edge_l),
        region_l=list(region_l),
        weights=weights,
        total=combine_terms(cls, edge_b, region_b, edge_l, region_l, weights),
    )


def compute_losses(
    logits: torch.Tensor,
    labels,
    per_token_maps: torch.Tensor,
    fused_map: torch.Tensor,
    image: torch.Tensor,
    weights: LossWeights,
    edge_fn: Callable = edge_loss,
    region_fn: Callable = region_loss,
) -> LossBreakdown:
    """Evaluate every component on one batch and combine.

    `per_token_maps` is (B, G, h, w) (or unbatched (G, h, w)); the per-token
    edge/region lists carry one entry per global token.
    """
    if per_token_maps.dim() == 3:
        per_token_maps = per_token_maps[None]
    if fused_map.dim() == 2:
        fused_map = fused_map[None]
    cls = classification_loss(logits, labels)
    e_b = edge_fn(fused_map, image)
    r_b = region_fn(fused_map)
    num_tokens = per_token_maps.shape[1]
    e_l = [edge_fn(per_token_maps[:, i], image) for i in range(num_tokens)]
    r_l = [region_fn(per_token_maps[:, i]) for i in range(num_tokens)]
    return total_loss(cls, e_b, r_b, e_l, r_l, weights)

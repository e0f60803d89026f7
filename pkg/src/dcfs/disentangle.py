"""Splitting a feature map into semantic and domain parts.

A coordinate-attention gate produces a per-element weight A in (0,1); the
semantic part is F * A and the domain part F * (1-A), so the two parts
always reconstruct the whole feature exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericError


@dataclass
class FeatureBundle:
    """Whole feature map, its gate, and the two disentangled parts."""

    whole: torch.Tensor     # [B,C,H,W]
    gate: torch.Tensor      # [B,C,H,W], entries in (0,1)
    semantic: torch.Tensor  # whole * gate
    domain: torch.Tensor    # whole * (1 - gate)


class CoordinateGate(nn.Module):
    """Coordinate attention: directional pooling, a shared bottleneck
    transform, and two sigmoid gates whose broadcast product is the
    attention map.

    The expand transforms are zero-initialized so both directional gates
    start at 0.5 (the product gate at 0.25) and adaptation starts from a
    symmetric split.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels < reduction:
            raise ConfigurationError(
                f"channels ({channels}) must be >= reduction ratio ({reduction})")
        self.channels = channels
        self.reduction = reduction
        mid = channels // reduction
        self.reduce = nn.Conv2d(channels, mid, 1)
        self.expand_h = nn.Conv2d(mid, channels, 1)
        self.expand_w = nn.Conv2d(mid, channels, 1)
        nn.init.zeros_(self.expand_h.weight)
        nn.init.zeros_(self.expand_h.bias)
        nn.init.zeros_(self.expand_w.weight)
        nn.init.zeros_(self.expand_w.bias)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feature_map.shape
        if c != self.channels:
            raise ConfigurationError(
                f"gate built for {self.channels} channels, got {c}")
        pooled_h = feature_map.mean(dim=3, keepdim=True)                    # [B,C,H,1]
        pooled_w = feature_map.mean(dim=2, keepdim=True).permute(0, 1, 3, 2)  # [B,C,W,1]
        joint = F.relu(self.reduce(torch.cat([pooled_h, pooled_w], dim=2)))
        part_h, part_w = torch.split(joint, [h, w], dim=2)
        gate_h = torch.sigmoid(self.expand_h(part_h))                       # [B,C,H,1]
        gate_w = torch.sigmoid(self.expand_w(part_w.permute(0, 1, 3, 2)))   # [B,C,1,W]
        return gate_h * gate_w

    def attend(self, feature_map: torch.Tensor) -> torch.Tensor:
        return self.forward(feature_map)


class FeatureDisentangler(nn.Module):
    """Applies the gate and packages the split."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.gate = CoordinateGate(channels, reduction)

    def disentangle(self, feature_map: torch.Tensor) -> FeatureBundle:
        if not torch.isfinite(feature_map).all():
            raise NumericError("non-finite values in feature map")
        gate = self.gate(feature_map)
        return FeatureBundle(whole=feature_map, gate=gate,
                             semantic=feature_map * gate,
                             domain=feature_map * (1.0 - gate))

    forward = disentangle

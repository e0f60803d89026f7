"""The frozen domain classifier and the trainable semantic classifier.

Both heads are linear layers seeded from the source classifier. The domain
head stays bit-identical to the source checkpoint for the whole run; the
semantic head adapts. Probabilities are combined by averaging, which keeps
the result a valid distribution and preserves the argmax of the sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import global_avg_pool
from .disentangle import FeatureBundle
from .errors import ConfigurationError


@dataclass
class PredictionBundle:
    """Per-branch and combined probability rows for one batch."""

    semantic_probs: torch.Tensor  # P from the semantic part       [B,C]
    domain_probs: torch.Tensor    # P from the domain part         [B,C]
    combined_probs: torch.Tensor  # average of the two             [B,C]
    whole_probs: torch.Tensor     # semantic head on the whole map [B,C]


def combine(semantic_probs: torch.Tensor, domain_probs: torch.Tensor) -> torch.Tensor:
    """Average two probability rows; argmax matches the unnormalized sum."""
    return 0.5 * (semantic_probs + domain_probs)


class DualHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int):
        super().__init__()
        self.semantic = nn.Linear(in_dim, num_classes)
        self.domain = nn.Linear(in_dim, num_classes)
        self.domain.weight.requires_grad_(False)
        self.domain.bias.requires_grad_(False)

    @classmethod
    def from_classifier(cls, classifier: nn.Linear) -> "DualHead":
        head = cls(classifier.in_features, classifier.out_features)
        with torch.no_grad():
            for dst in (head.semantic, head.domain):
                dst.weight.copy_(classifier.weight)
                dst.bias.copy_(classifier.bias)
        return head

    def _check_dim(self, pooled: torch.Tensor) -> None:
        if pooled.shape[-1] != self.semantic.in_features:
            raise ConfigurationError(
                f"pooled feature dim {pooled.shape[-1]} does not match head "
                f"input dim {self.semantic.in_features}")

    def predict_parts(self, bundle: FeatureBundle) -> tuple[torch.Tensor, torch.Tensor]:
        """Semantic head on the semantic part, frozen domain head on the
        domain part; both softmaxed after global average pooling."""
        pooled_s = global_avg_pool(bundle.semantic)
        pooled_d = global_avg_pool(bundle.domain)
        self._check_dim(pooled_s)
        p_s = torch.softmax(self.semantic(pooled_s), dim=1)
        p_d = torch.softmax(self.domain(pooled_d), dim=1)
        return p_s, p_d

    def predict_whole(self, feature_map: torch.Tensor) -> torch.Tensor:
        """Semantic head applied to the undisentangled feature map."""
        pooled = global_avg_pool(feature_map)
        self._check_dim(pooled)
        return torch.softmax(self.semantic(pooled), dim=1)

    def predict_bundle(self, bundle: FeatureBundle) -> PredictionBundle:
        p_s, p_d = self.predict_parts(bundle)
        return PredictionBundle(semantic_probs=p_s, domain_probs=p_d,
                                combined_probs=combine(p_s, p_d),
                                whole_probs=self.predict_whole(bundle.whole))

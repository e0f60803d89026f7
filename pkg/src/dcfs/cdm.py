"""Classifier-discrepancy regularizer.

L1 distance between the two branch predictions plus an L1 penalty on the
cross-head weight product, which discourages the per-class decision
directions of the two heads from aligning. Biases are excluded: only the
weight directions define decision geometry.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError


@dataclass
class CdmConfig:
    reg_weight: float = 0.1  # weight of the cross-head product term

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ConfigurationError(f"reg_weight must be >= 0, got {self.reg_weight}")


def loss_cdm(semantic_probs: torch.Tensor, domain_probs: torch.Tensor,
             semantic_weight: torch.Tensor, domain_weight: torch.Tensor,
             cfg: CdmConfig = CdmConfig()) -> torch.Tensor:
    """Batch-mean ||P_sem - P_dom||_1 plus reg_weight * ||W_sem W_dom^T||_1.

    Gradient reaches the semantic weights and, through the probabilities,
    whatever produced them; the domain weights stay frozen upstream.
    """
    if semantic_probs.shape != domain_probs.shape:
        raise ConfigurationError(
            f"probability shapes differ: {tuple(semantic_probs.shape)} vs "
            f"{tuple(domain_probs.shape)}")
    if semantic_weight.shape != domain_weight.shape:
        raise ConfigurationError(
            f"weight shapes differ: {tuple(semantic_weight.shape)} vs "
            f"{tuple(domain_weight.shape)}")
    dist = (semantic_probs - domain_probs).abs().sum(dim=1).mean()
    overlap = (semantic_weight @ domain_weight.T).abs().sum()
    return dist + cfg.reg_weight * overlap

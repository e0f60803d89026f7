"""Feature-disentanglement consistency losses.

Two terms: a single-sample term pulling the whole-feature prediction
toward the (detached) combined disentangled prediction, and a mixup term
doing the same for convex combinations of in-batch sample pairs. Targets
are detached by default; predictions carry gradient.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass
class MixupConfig:
    alpha: float = 1.0  # Beta(alpha, alpha) concentration
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"mixup alpha must be > 0, got {self.alpha}")

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def cross_entropy(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Batch-mean soft cross-entropy -sum(target * log pred).

    Predictions are floored at 1e-12 before the log, so the value is finite
    for any finite inputs.
    """
    if target.shape != pred.shape:
        raise ConfigurationError(
            f"target shape {tuple(target.shape)} != pred shape {tuple(pred.shape)}")
    return -(target * pred.clamp_min(LOG_FLOOR).log()).sum(dim=1).mean()


def loss_single(combined_probs: torch.Tensor, whole_probs: torch.Tensor,
                symmetric: bool = False) -> torch.Tensor:
    """Consistency of the combined disentangled prediction with the
    whole-feature prediction: -mean sum(P_combined * log P_whole).

    The whole-feature prediction is the detached anchor; gradient flows
    through the combined prediction (and with it the attention gate and
    the semantic branch). Anchoring on the combined side instead makes
    adaptation chase an ever-softer target and measurably collapses on
    small models, so the anchor sits on the whole-feature side. The
    symmetric variant keeps both sides live for ablation.
    """
    pred = whole_probs if symmetric else whole_probs.detach()
    return cross_entropy(combined_probs, pred)


def draw_mix_coeff(rng: np.random.Generator, alpha: float) -> float:
    """One Beta(alpha, alpha) coefficient per batch."""
    return float(rng.beta(alpha, alpha))


def mixup_pair(x_i: torch.Tensor, x_j: torch.Tensor, y_i: torch.Tensor,
               y_j: torch.Tensor, coeff: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Convex combination of two sample batches and their soft labels.

    The mixed label is detached: it is a target, never a prediction.
    """
    x_mix = coeff * x_i + (1.0 - coeff) * x_j
    y_mix = (coeff * y_i + (1.0 - coeff) * y_j).detach()
    return x_mix, y_mix


def mixup_batch(x: torch.Tensor, y_soft: torch.Tensor, rng: np.random.Generator,
                alpha: float = 1.0) -> tuple[torch.Tensor, torch.Tensor, float]:
    """Pair each sample with its in-batch successor (roll by one)."""
    coeff = draw_mix_coeff(rng, alpha)
    x_mix, y_mix = mixup_pair(x, torch.roll(x, 1, dims=0),
                              y_soft, torch.roll(y_soft, 1, dims=0), coeff)
    return x_mix, y_mix, coeff


def loss_mixup(y_mix: torch.Tensor, mixed_pred: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the whole-feature prediction on the mixed batch
    against the mixed (detached) soft label."""
    return cross_entropy(y_mix.detach(), mixed_pred)


def loss_fdc(model, x: torch.Tensor, combined_probs: torch.Tensor,
             whole_probs: torch.Tensor, rng: np.random.Generator,
             alpha: float = 1.0, symmetric: bool = False,
             enable_mixup: bool = True) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of the single-sample and mixup consistency terms.

    `model` must expose `predict_whole_from(x)`. Batches of size one cannot
    form a mixup partner and degrade to the single term.
    """
    single = loss_single(combined_probs, whole_probs, symmetric=symmetric)
    if not enable_mixup or x.shape[0] < 2:
        if enable_mixup and x.shape[0] < 2:
            logger.warning("batch of size 1: mixup term skipped")
        return single, {"single": float(single.detach()), "mixup": 0.0}
    x_mix, y_mix, _ = mixup_batch(x, combined_probs.detach(), rng, alpha)
    mixed_pred = model.predict_whole_from(x_mix)
    mix = loss_mixup(y_mix, mixed_pred)
    return single + mix, {"single": float(single.detach()), "mixup": float(mix.detach())}

"""Confidence-weighted self-supervised consistency on augmented views.

Pseudo-labels are the detached whole-feature predictions. Each sample's
loss weight follows a truncated Gaussian: full weight above the running
mean confidence, Gaussian decay below it. The running mean/variance of
batch max-confidence are EMA-tracked, and predictions are rescaled toward
a uniform class marginal before the weight is read off, to counter
imbalanced pseudo-labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import torch

from .errors import ConfigurationError, DataError, NumericError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
CLASS_MEAN_FLOOR = 1e-8
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class ConfidenceState:
    """EMA statistics of batch max-confidence plus the mean prediction."""

    mean_conf: float          # EMA of batch mean max-confidence
    var_conf: float           # EMA of (Bessel-corrected) batch variance
    class_mean: torch.Tensor  # EMA of the mean prediction vector, [C]
    momentum: float = 0.999
    max_weight: float = 1.0
    step: int = 0

    @classmethod
    def initial(cls, num_classes: int, momentum: float = 0.999,
                max_weight: float = 1.0) -> "ConfidenceState":
        if not 0.0 <= momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0,1), got {momentum}")
        return cls(mean_conf=1.0 / num_classes, var_conf=1.0,
                   class_mean=torch.full((num_classes,), 1.0 / num_classes,
                                         dtype=torch.float64),
                   momentum=momentum, max_weight=max_weight, step=0)


def batch_stats(probs: torch.Tensor) -> tuple[float, float]:
    """Mean and population variance of per-row max-confidence."""
    if probs.shape[0] == 0:
        raise DataError("cannot compute confidence statistics of an empty batch")
    maxima = probs.max(dim=1).values.double()
    mu = maxima.mean()
    var = ((maxima - mu) ** 2).mean()
    return float(mu), float(var)


def ema_update(state: ConfidenceState, batch_mean: float, batch_var: float,
               batch_size: int, batch_class_mean: torch.Tensor) -> ConfidenceState:
    """Blend batch statistics into the running state.

    The variance contribution carries the Bessel factor B/(B-1); a batch of
    one sample leaves the variance untouched.
    """
    m = state.momentum
    mean_conf = m * state.mean_conf + (1.0 - m) * batch_mean
    if batch_size >= 2:
        var_conf = m * state.var_conf + (1.0 - m) * (batch_size / (batch_size - 1)) * batch_var
    else:
        var_conf = state.var_conf
    class_mean = m * state.class_mean + (1.0 - m) * batch_class_mean.double()
    return replace(state, mean_conf=mean_conf, var_conf=var_conf,
                   class_mean=class_mean, step=state.step + 1)


def uniform_align(probs: torch.Tensor, class_mean: torch.Tensor) -> torch.Tensor:
    """Rescale rows by uniform/class_mean, then renormalize to sum 1."""
    if not torch.isfinite(class_mean).all():
        raise NumericError("non-finite class mean")
    c = probs.shape[1]
    ratio = (1.0 / c) / class_mean.clamp_min(CLASS_MEAN_FLOOR)
    scaled = probs * ratio.to(probs.dtype)
    total = scaled.sum(dim=1, keepdim=True)
    if (total <= 0).any():
        raise NumericError("uniform alignment collapsed a probability row to zero")
    return scaled / total


def sample_weight(probs: torch.Tensor, state: ConfidenceState) -> torch.Tensor:
    """Per-row truncated-Gaussian weight from the aligned max-confidence."""
    var = state.var_conf
    if var <= VAR_FLOOR:
        logger.warning("degenerate confidence variance %.3e clamped", var)
        var = VAR_FLOOR
    aligned_max = uniform_align(probs, state.class_mean).max(dim=1).values.double()
    gauss = state.max_weight * torch.exp(
        -((aligned_max - state.mean_conf) ** 2) / (2.0 * var))
    weights = torch.where(aligned_max < state.mean_conf,
                          gauss, torch.full_like(gauss, state.max_weight))
    return weights.to(probs.dtype)


def scl_core(pseudo_probs: torch.Tensor, view_probs: torch.Tensor,
             state: ConfidenceState, hard_labels: bool = False,
             per_batch_class_mean: bool = False
             ) -> tuple[torch.Tensor, ConfidenceState, dict[str, float]]:
    """Weighted cross-entropy between pseudo-labels and augmented-view
    predictions, plus the state bookkeeping.

    Statistics are taken from the unaligned maxima, the state is updated
    first, and weights are then read from the updated state.
    """
    pseudo = pseudo_probs.detach()
    mu_b, var_b = batch_stats(pseudo)
    new_state = ema_update(state, mu_b, var_b, pseudo.shape[0], pseudo.mean(dim=0))

    weight_state = new_state
    if per_batch_class_mean:
        weight_state = replace(new_state, class_mean=pseudo.mean(dim=0).double())
    weights = sample_weight(pseudo, weight_state)

    target = pseudo
    if hard_labels:
        target = torch.nn.functional.one_hot(
            pseudo.argmax(dim=1), pseudo.shape[1]).to(pseudo.dtype)
    row_ce = -(target * view_probs.clamp_min(LOG_FLOOR).log()).sum(dim=1)
    loss = (weights * row_ce).mean()
    info = {"mu_t": new_state.mean_conf, "sigma2_t": new_state.var_conf,
            "mean_weight": float(weights.mean())}
    return loss, new_state, info


@dataclass
class AugmentPolicy:
    """Stochastic flip / padded crop / brightness-contrast jitter.

    All transforms keep the image shape and the [0,1] value range.
    """

    flip: bool = True
    crop_pad: int = 4
    jitter: float = 0.2

    def apply(self, x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        b = x.shape[0]
        out = x.clone()
        if self.flip:
            do_flip = torch.rand(b, generator=gen) < 0.5
            out[do_flip] = out[do_flip].flip(-1)
        if self.crop_pad > 0:
            pad = self.crop_pad
            padded = torch.nn.functional.pad(out, (pad, pad, pad, pad), mode="reflect")
            offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=gen)
            h, w = x.shape[-2:]
            crops = [padded[i, :, oy:oy + h, ox:ox + w]
                     for i, (oy, ox) in enumerate(offs.tolist())]
            out = torch.stack(crops)
        if self.jitter > 0:
            lo, hi = 1.0 - self.jitter, 1.0 + self.jitter
            bright = (lo + (hi - lo) * torch.rand(b, 1, 1, 1, generator=gen)).to(out.dtype)
            contrast = (lo + (hi - lo) * torch.rand(b, 1, 1, 1, generator=gen)).to(out.dtype)
            out = (out * bright).clamp(0.0, 1.0)
            mean = out.mean(dim=(2, 3), keepdim=True)
            out = ((out - mean) * contrast + mean).clamp(0.0, 1.0)
        return out


def loss_scl(model, x: torch.Tensor, state: ConfidenceState,
             policy: AugmentPolicy, gen: torch.Generator,
             pseudo_probs: torch.Tensor | None = None,
             hard_labels: bool = False, per_batch_class_mean: bool = False
             ) -> tuple[torch.Tensor, ConfidenceState, dict[str, float]]:
    """Full sample-consistency loss for one image batch.

    `model` must expose `predict_whole_from(x)`. The pseudo-label forward
    may be shared with the caller via `pseudo_probs`.
    """
    if pseudo_probs is None:
        pseudo_probs = model.predict_whole_from(x)
    view = policy.apply(x, gen)
    view_probs = model.predict_whole_from(view)
    return scl_core(pseudo_probs.detach(), view_probs, state,
                    hard_labels=hard_labels,
                    per_batch_class_mean=per_batch_class_mean)

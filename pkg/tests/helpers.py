"""Shared test utilities: a tiny sub-1k-parameter backbone, finite-difference
gradient checking, and numpy straight-line oracles."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from dcfs.backbone import Backbone, SwitchableBatchNorm2d


class TinyBackbone(Backbone):
    """Two conv blocks, 6 feature channels; ~360 trainable parameters."""

    arch_id = "tiny"

    def __init__(self, num_classes: int = 3):
        super().__init__(num_classes, pooled_dim=6)
        self.stem = nn.Sequential(
            nn.Conv2d(3, 4, 3, padding=1, bias=False),
            SwitchableBatchNorm2d(4),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(4, 6, 3, padding=1, bias=False),
            SwitchableBatchNorm2d(6),
            nn.ReLU(),
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.stem(self.normalize(x))


def make_tiny_backbone(seed: int = 0, num_classes: int = 3) -> TinyBackbone:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = TinyBackbone(num_classes)
    model.eval()
    return model


def finite_diff_grads(loss_fn, params, eps: float = 1e-6) -> list[torch.Tensor]:
    """Central finite differences of a scalar closure w.r.t. each parameter."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * eps)
            grads.append(g)
    return grads


def analytic_grads(loss: torch.Tensor, params) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def assert_grads_close(analytic, numeric, rtol: float = 1e-3, atol: float = 1e-7):
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        diff = (a - n).abs()
        bound = rtol * torch.maximum(a.abs(), n.abs()) + atol
        bad = diff > bound
        assert not bad.any(), (
            f"param {i}: {int(bad.sum())} coords off; "
            f"worst diff {float(diff.max()):.3e} vs bound {float(bound.min()):.3e}")


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def random_prob_rows(rng: np.random.Generator, batch: int, classes: int) -> np.ndarray:
    raw = rng.random((batch, classes)) + 1e-3
    return raw / raw.sum(axis=1, keepdims=True)


def scl_chain_oracle(pseudo: np.ndarray, view: np.ndarray, mu: float, var: float,
                     class_mean: np.ndarray, momentum: float, batch_size: int,
                     max_weight: float = 1.0):
    """Straight-line numpy recomputation of the confidence-weighted
    consistency chain: batch stats -> EMA -> alignment -> weights -> loss."""
    maxima = pseudo.max(axis=1)
    mu_b = maxima.mean()
    var_b = ((maxima - mu_b) ** 2).mean()
    mu_t = momentum * mu + (1.0 - momentum) * mu_b
    if batch_size >= 2:
        var_t = momentum * var + (1.0 - momentum) * (batch_size / (batch_size - 1)) * var_b
    else:
        var_t = var
    cm_t = momentum * class_mean + (1.0 - momentum) * pseudo.mean(axis=0)

    c = pseudo.shape[1]
    ratio = (1.0 / c) / np.maximum(cm_t, 1e-8)
    scaled = pseudo * ratio
    aligned = scaled / scaled.sum(axis=1, keepdims=True)
    q = aligned.max(axis=1)
    denom = 2.0 * max(var_t, 1e-12)
    weights = np.where(q < mu_t, max_weight * np.exp(-((q - mu_t) ** 2) / denom),
                       max_weight)
    row_ce = -(pseudo * np.log(np.maximum(view, 1e-12))).sum(axis=1)
    loss = (weights * row_ce).mean()
    return {"mu_b": mu_b, "var_b": var_b, "mu_t": mu_t, "var_t": var_t,
            "class_mean": cm_t, "aligned": aligned, "weights": weights,
            "loss": loss}

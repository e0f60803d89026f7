"""Procedural toy image datasets for desk-scale experiments.

Each class is a distinct geometric pattern drawn at a jittered position
with randomized foreground/background colors, so a small CNN can learn
the task quickly while global corruptions (noise, contrast, blur, ...)
still degrade a source-only model substantially.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError

_PATTERNS = (
    "disk",
    "square",
    "ring",
    "plus",
    "diag_cross",
    "h_stripes",
    "v_stripes",
    "checker",
    "triangle",
    "frame",
)


@dataclass
class LabeledDataset:
    """Images in [0,1], shape [N,3,H,W] float32, with int64 labels [N]."""

    images: torch.Tensor
    labels: torch.Tensor
    name: str = "toy_shapes"

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1


def _pattern_mask(kind: str, size: int, cx: float, cy: float, radius: float,
                  phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    if kind == "disk":
        return r <= radius
    if kind == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "ring":
        return (r <= radius) & (r >= 0.55 * radius)
    if kind == "plus":
        w = max(1.5, radius * 0.35)
        return ((np.abs(dx) <= w) | (np.abs(dy) <= w)) & (r <= 1.25 * radius)
    if kind == "diag_cross":
        w = max(1.5, radius * 0.4)
        return ((np.abs(dx - dy) <= w) | (np.abs(dx + dy) <= w)) & (r <= 1.25 * radius)
    if kind == "h_stripes":
        return (((yy + phase) // 3) % 2 == 0) & (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "v_stripes":
        return (((xx + phase) // 3) % 2 == 0) & (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == "checker":
        return ((((xx + phase) // 4) + ((yy + phase) // 4)) % 2 == 0) \
            & (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if kind == "triangle":
        return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) * 0.6)
    if kind == "frame":
        outer = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
        inner = (np.abs(dx) <= 0.55 * radius) & (np.abs(dy) <= 0.55 * radius)
        return outer & ~inner
    raise ConfigurationError(f"unknown pattern kind: {kind}")


def make_shape_dataset(num_samples: int, num_classes: int = 10, image_size: int = 32,
                       seed: int = 0, noise_std: float = 0.02) -> LabeledDataset:
    """Generate a balanced shape-classification dataset.

    Deterministic given the seed. Supports at most len(_PATTERNS) classes.
    """
    if not (2 <= num_classes <= len(_PATTERNS)):
        raise ConfigurationError(
            f"num_classes must be in [2, {len(_PATTERNS)}], got {num_classes}")
    rng = np.random.default_rng(seed)
    images = np.empty((num_samples, 3, image_size, image_size), dtype=np.float32)
    labels = rng.integers(0, num_classes, size=num_samples)

    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    for i in range(num_samples):
        k = int(labels[i])
        # smooth background: low-frequency gradient in a random direction
        base = rng.uniform(0.25, 0.75, size=3)
        gx, gy = rng.uniform(-0.15, 0.15, size=2)
        grad = (gx * (xx / image_size - 0.5) + gy * (yy / image_size - 0.5))
        bg = base[:, None, None] + grad[None]

        # foreground color kept away from the local background level
        fg = np.empty(3)
        for c in range(3):
            lo, hi = 0.05, 0.95
            if rng.random() < 0.5:
                fg[c] = rng.uniform(lo, max(lo + 0.01, base[c] - 0.35))
            else:
                fg[c] = rng.uniform(min(hi - 0.01, base[c] + 0.35), hi)

        cx = image_size / 2 + rng.uniform(-4, 4)
        cy = image_size / 2 + rng.uniform(-4, 4)
        radius = rng.uniform(0.26, 0.36) * image_size
        mask = _pattern_mask(_PATTERNS[k], image_size, cx, cy, radius,
                             phase=int(rng.integers(0, 4)))

        img = np.where(mask[None], fg[:, None, None], bg)
        img = img + rng.normal(0.0, noise_std, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)

    return LabeledDataset(images=torch.from_numpy(images),
                          labels=torch.from_numpy(labels.astype(np.int64)))

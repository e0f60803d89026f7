"""Feature extractors, the source classifier, pretraining and checkpoint I/O.

Backbones expose `features(x)` (the pre-pooling feature map), global
average pooling, and a linear source classifier. All normalization layers
are switchable between stored running statistics (`source_stats`) and
per-batch statistics computed transiently on every forward (`batch_stats`);
the latter never touches the running buffers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledDataset
from .errors import ConfigurationError, DataError

NORM_MODES = ("source_stats", "batch_stats")


class SwitchableBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm whose eval-time statistics source can be toggled.

    In `batch_stats` mode the forward uses current-batch statistics without
    updating the running buffers. Standard training behavior (batch stats +
    running-stat updates) still applies when the module is in train mode.
    """

    def __init__(self, num_features: int):
        super().__init__(num_features)
        self.use_batch_stats = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            return super().forward(x)
        if self.use_batch_stats:
            return F.batch_norm(x, None, None, self.weight, self.bias,
                                training=True, momentum=0.0, eps=self.eps)
        return F.batch_norm(x, self.running_mean, self.running_var,
                            self.weight, self.bias, training=False,
                            momentum=0.0, eps=self.eps)


def set_norm_mode(model: nn.Module, mode: str) -> None:
    """Switch every normalization layer to source or batch statistics."""
    if mode not in NORM_MODES:
        raise ConfigurationError(f"unknown norm mode: {mode!r}, expected one of {NORM_MODES}")
    for m in model.modules():
        if isinstance(m, SwitchableBatchNorm2d):
            m.use_batch_stats = mode == "batch_stats"


def global_avg_pool(feature_map: torch.Tensor) -> torch.Tensor:
    """[B,C,H,W] -> [B,C] spatial mean."""
    return feature_map.mean(dim=(2, 3))


class Backbone(nn.Module):
    """Feature extractor + pooling + linear source classifier.

    Subclasses implement `features`. Inputs are images in [0,1]; per-channel
    normalization (buffers `norm_mean`, `norm_std`) is applied inside the
    forward so augmentation and corruption always operate in image space.
    """

    arch_id: str = ""

    def __init__(self, num_classes: int, pooled_dim: int,
                 norm_mean=(0.5, 0.5, 0.5), norm_std=(0.5, 0.5, 0.5)):
        super().__init__()
        self.num_classes = num_classes
        self.pooled_dim = pooled_dim
        self.register_buffer("norm_mean", torch.tensor(norm_mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("norm_std", torch.tensor(norm_std, dtype=torch.float32).view(1, 3, 1, 1))
        self.classifier = nn.Linear(pooled_dim, num_classes)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.norm_mean) / self.norm_std

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(global_avg_pool(self.features(x)))


class SmallCnn(Backbone):
    """Four conv-BN-ReLU blocks (32/64/128/128) for 32x32 inputs."""

    arch_id = "small_cnn"

    def __init__(self, num_classes: int, **kwargs):
        widths = (32, 64, 128, 128)
        super().__init__(num_classes, pooled_dim=widths[-1], **kwargs)
        layers = []
        in_ch = 3
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(in_ch, w, 3, padding=1, bias=False),
                       SwitchableBatchNorm2d(w),
                       nn.ReLU(inplace=True)]
            if i < 3:
                layers.append(nn.MaxPool2d(2))
            in_ch = w
        self.stem = nn.Sequential(*layers)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.stem(self.normalize(x))


class _WideBlock(nn.Module):
    """Pre-activation residual block with two 3x3 convolutions."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.bn1 = SwitchableBatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn2 = SwitchableBatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


class WideResNet28(Backbone):
    """Depth-28 wide residual network; pooled_dim = 64 * widen_factor."""

    arch_id = "wrn28"

    def __init__(self, num_classes: int, widen_factor: int = 10, **kwargs):
        widths = [16, 16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
        super().__init__(num_classes, pooled_dim=widths[-1], **kwargs)
        self.widen_factor = widen_factor
        n = (28 - 4) // 6  # blocks per group
        self.conv1 = nn.Conv2d(3, widths[0], 3, padding=1, bias=False)
        groups = []
        in_ch = widths[0]
        for gi, out_ch in enumerate(widths[1:]):
            stride = 1 if gi == 0 else 2
            for bi in range(n):
                groups.append(_WideBlock(in_ch, out_ch, stride if bi == 0 else 1))
                in_ch = out_ch
        self.blocks = nn.Sequential(*groups)
        self.bn_final = SwitchableBatchNorm2d(in_ch)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        out = self.blocks(self.conv1(self.normalize(x)))
        return F.relu(self.bn_final(out))


_ARCHS = {"small_cnn": SmallCnn, "wrn28": WideResNet28}


def build_backbone(arch_id: str, num_classes: int, seed: int, **arch_kwargs) -> Backbone:
    """Deterministically construct and initialize a backbone."""
    if arch_id not in _ARCHS:
        raise ConfigurationError(f"unknown arch_id: {arch_id!r}, expected one of {sorted(_ARCHS)}")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = _ARCHS[arch_id](num_classes, **arch_kwargs)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Checkpoint I/O: a single NPZ container of float32 arrays plus metadata.
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named parameter arrays plus string metadata.

    Entries are stored as `param/<name>` float32 arrays; metadata is a
    sorted list of `key=value` strings under the `meta` entry.
    """

    arrays: dict[str, np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        payload = {f"param/{k}": v for k, v in self.arrays.items()}
        payload["meta"] = np.array(sorted(f"{k}={v}" for k, v in self.meta.items()))
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with np.load(path) as npz:
            arrays = {k[len("param/"):]: npz[k] for k in npz.files if k.startswith("param/")}
            meta = {}
            if "meta" in npz.files:
                for line in npz["meta"]:
                    key, _, value = str(line).partition("=")
                    meta[key] = value
        return cls(arrays=arrays, meta=meta)

    @classmethod
    def from_model(cls, model: nn.Module, meta: dict[str, str]) -> "Checkpoint":
        arrays = {}
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().numpy()
            # integer bookkeeping buffers survive the float32 container unharmed
            arrays[name] = arr.astype(np.float32)
        return cls(arrays=arrays, meta=dict(meta))

    def load_into(self, model: nn.Module) -> None:
        state = model.state_dict()
        if set(state) != set(self.arrays):
            missing = set(state) - set(self.arrays)
            extra = set(self.arrays) - set(state)
            raise ConfigurationError(
                f"checkpoint/model mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        new_state = {name: torch.from_numpy(self.arrays[name]).to(tensor.dtype)
                     for name, tensor in state.items()}
        model.load_state_dict(new_state)


def backbone_meta(model: Backbone, seed: int, dataset: str, epochs: int,
                  clean_accuracy: float) -> dict[str, str]:
    meta = {
        "arch_id": model.arch_id,
        "num_classes": str(model.num_classes),
        "seed": str(seed),
        "dataset": dataset,
        "epochs": str(epochs),
        "clean_accuracy": repr(float(clean_accuracy)),
    }
    if model.arch_id == "wrn28":
        meta["widen_factor"] = str(model.widen_factor)
    return meta


def backbone_from_checkpoint(ckpt: Checkpoint) -> Backbone:
    """Rebuild the architecture named in the metadata and load its weights."""
    arch_id = ckpt.meta.get("arch_id")
    if arch_id is None:
        raise ConfigurationError("checkpoint metadata lacks arch_id")
    kwargs = {}
    if arch_id == "wrn28":
        kwargs["widen_factor"] = int(ckpt.meta.get("widen_factor", "10"))
    model = build_backbone(arch_id, int(ckpt.meta["num_classes"]),
                           seed=int(ckpt.meta.get("seed", "0")), **kwargs)
    ckpt.load_into(model)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Source pretraining
# ---------------------------------------------------------------------------

@torch.no_grad()
def _accuracy(model: Backbone, dataset: LabeledDataset, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        correct += int((model(x).argmax(dim=1) == y).sum())
    return correct / len(dataset)


def pretrain_source(backbone: Backbone, dataset: LabeledDataset, epochs: int,
                    seed: int, lr: float = 1e-3, batch_size: int = 128) -> Checkpoint:
    """Train the source model with cross-entropy; seeded and reproducible.

    Records the post-training accuracy on `dataset` in the checkpoint
    metadata. `epochs=0` leaves the parameters at initialization.
    """
    labels = dataset.labels
    if labels.numel() and (labels.min() < 0 or labels.max() >= backbone.num_classes):
        raise DataError(
            f"labels must lie in [0, {backbone.num_classes}), "
            f"found range [{int(labels.min())}, {int(labels.max())}]")

    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(backbone.parameters(), lr=lr)
    for _ in range(epochs):
        backbone.train()
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(dataset), batch_size):
            idx = order[start:start + batch_size]
            logits = backbone(dataset.images[idx])
            loss = F.cross_entropy(logits, dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    backbone.eval()
    acc = _accuracy(backbone, dataset) if epochs > 0 else 0.0
    meta = backbone_meta(backbone, seed=seed, dataset=dataset.name,
                         epochs=epochs, clean_accuracy=acc)
    return Checkpoint.from_model(backbone, meta)

"""Continual domain streams: benchmark corruption files or synthetic
corruptions over a clean toy set, presented in a fixed online order.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
from scipy import ndimage

from .data import LabeledDataset
from .errors import ConfigurationError, DataError

# column order of the standard benchmark tables
BENCHMARK_CORRUPTIONS = (
    "gaussian", "shot", "impulse", "defocus", "glass", "motion", "zoom",
    "snow", "frost", "fog", "brightness", "contrast", "elastic", "pixelate",
    "jpeg",
)

SYNTHETIC_CORRUPTIONS = (
    "gaussian_noise", "shot_noise", "impulse_noise", "gaussian_blur",
    "contrast", "brightness", "pixelate",
)

# severity 1..5 parameter tables; index 0 unused (severity 0 = identity).
# Severity-5 values are calibrated so the toy source model's per-corruption
# error profile mirrors the standard benchmark's difficulty spread.
_SEVERITY_PARAMS: dict[str, tuple] = {
    "gaussian_noise": (None, 0.03, 0.05, 0.07, 0.09, 0.12),   # noise std
    "shot_noise": (None, 400.0, 200.0, 120.0, 70.0, 40.0),    # photons/unit
    "impulse_noise": (None, 0.02, 0.04, 0.06, 0.09, 0.12),    # flip fraction
    "gaussian_blur": (None, 0.5, 0.7, 0.9, 1.1, 1.4),         # kernel sigma
    "contrast": (None, 0.55, 0.45, 0.38, 0.31, 0.26),         # scale factor
    "brightness": (None, 0.06, 0.12, 0.18, 0.24, 0.30),       # additive shift
    "pixelate": (None, 17, 14, 11, 9, 7),                     # downsample size
}


@dataclass
class CorruptionSpec:
    """A named corruption with its severity -> parameter table."""

    name: str
    severity_params: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.name not in _SEVERITY_PARAMS:
            raise ConfigurationError(
                f"unknown corruption {self.name!r}, expected one of {SYNTHETIC_CORRUPTIONS}")
        if not self.severity_params:
            self.severity_params = _SEVERITY_PARAMS[self.name]

    def param(self, severity: int):
        if not 1 <= severity <= 5:
            raise ConfigurationError(f"severity must be in 1..5, got {severity}")
        return self.severity_params[severity]

    def make_rng(self, severity: int) -> np.random.Generator:
        return np.random.default_rng(
            [self.seed, severity, zlib.crc32(self.name.encode())])


def synthesize_corruption(clean: torch.Tensor, spec: CorruptionSpec,
                          severity: int) -> torch.Tensor:
    """Corrupt a [B,3,H,W] batch in [0,1]; deterministic given spec.seed.

    Severity 0 is the identity; distortion grows monotonically with
    severity for every implemented corruption.
    """
    if severity == 0:
        return clean.clone()
    param = spec.param(severity)
    rng = spec.make_rng(severity)
    x = clean.numpy().astype(np.float64)

    if spec.name == "gaussian_noise":
        x = x + rng.normal(0.0, param, size=x.shape)
    elif spec.name == "shot_noise":
        x = rng.poisson(np.clip(x, 0, 1) * param) / param
    elif spec.name == "impulse_noise":
        mask = rng.random(x.shape) < param
        salt = rng.random(x.shape) < 0.5
        x = np.where(mask, np.where(salt, 1.0, 0.0), x)
    elif spec.name == "gaussian_blur":
        x = ndimage.gaussian_filter(x, sigma=(0, 0, param, param), mode="reflect")
    elif spec.name == "contrast":
        mean = x.mean(axis=(2, 3), keepdims=True)
        x = (x - mean) * param + mean
    elif spec.name == "brightness":
        x = x + param
    elif spec.name == "pixelate":
        t = torch.from_numpy(x)
        small = torch.nn.functional.interpolate(t, size=(param, param), mode="area")
        x = torch.nn.functional.interpolate(small, size=x.shape[-2:], mode="nearest").numpy()
    return torch.from_numpy(np.clip(x, 0.0, 1.0)).to(clean.dtype)


@dataclass
class Domain:
    """One (corruption, severity) segment of the stream."""

    name: str
    severity: int
    loader: Callable[[], tuple[torch.Tensor, torch.Tensor]]

    def load(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.loader()


@dataclass
class DomainStream:
    """Ordered domains presented online; every sample appears exactly once."""

    domains: list[Domain]
    batch_size: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if not self.domains:
            raise ConfigurationError("stream needs at least one domain")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")

    def iter_batches(self) -> Iterator[tuple[Domain, torch.Tensor, torch.Tensor]]:
        """Yield (domain, images, labels) batches, keeping the final
        partial batch of each domain."""
        for dom in self.domains:
            images, labels = dom.load()
            for start in range(0, images.shape[0], self.batch_size):
                yield dom, images[start:start + self.batch_size], \
                    labels[start:start + self.batch_size]


def load_corruption_files(root_path: str | Path, corruption: str, severity: int,
                          normalize: tuple | None = None
                          ) -> tuple[torch.Tensor, torch.Tensor]:
    """Read one severity slice of a benchmark-layout corruption file.

    Files hold five stacked severity blocks of uint8 HWC images; severity s
    occupies rows [(s-1)*block, s*block). Pixels are scaled to [0,1]; an
    optional (mean, std) pair applies per-channel normalization for callers
    whose model does not normalize internally.
    """
    if not 1 <= severity <= 5:
        raise DataError(f"severity must be in 1..5, got {severity}")
    root = Path(root_path)
    image_file = root / f"{corruption}.npy"
    label_file = root / "labels.npy"
    if not image_file.exists():
        raise FileNotFoundError(f"missing corruption file: {image_file}")
    if not label_file.exists():
        raise FileNotFoundError(f"missing label file: {label_file}")
    images = np.load(image_file)
    labels = np.load(label_file)
    if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
        raise DataError(
            f"expected uint8 [N,H,W,3] array, got {images.dtype} {images.shape}")
    if images.shape[0] != labels.shape[0] or images.shape[0] % 5 != 0:
        raise DataError(
            f"image rows ({images.shape[0]}) must match labels "
            f"({labels.shape[0]}) and divide into 5 severity blocks")
    block = images.shape[0] // 5
    sl = slice((severity - 1) * block, severity * block)
    x = torch.from_numpy(images[sl].astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
    if normalize is not None:
        mean, std = normalize
        x = (x - torch.as_tensor(mean).view(1, 3, 1, 1)) / torch.as_tensor(std).view(1, 3, 1, 1)
    return x, torch.from_numpy(labels[sl].astype(np.int64))


@dataclass
class StreamConfig:
    corruptions: list[str] | None = None  # default: benchmark order for
    severity: int = 5                     # file-backed, implemented set for
    batch_size: int = 200                 # synthetic
    # synthetic mode
    clean: LabeledDataset | None = None
    samples_per_domain: int | None = None
    seed: int = 0
    # file-backed mode
    root: str | None = None


def build_stream(cfg: StreamConfig) -> DomainStream:
    """Assemble the ordered domain sequence from files or a clean set."""
    if cfg.corruptions is None:
        cfg.corruptions = list(BENCHMARK_CORRUPTIONS if cfg.root is not None
                               else SYNTHETIC_CORRUPTIONS)
    if not cfg.corruptions:
        raise ConfigurationError("empty corruption list")
    domains: list[Domain] = []
    if cfg.root is not None:
        for name in cfg.corruptions:
            domains.append(Domain(
                name=name, severity=cfg.severity,
                loader=lambda n=name: load_corruption_files(cfg.root, n, cfg.severity)))
        return DomainStream(domains, cfg.batch_size, provenance="file-backed")

    if cfg.clean is None:
        raise ConfigurationError("synthetic stream needs a clean dataset")
    clean = cfg.clean
    n = cfg.samples_per_domain or len(clean)
    if n > len(clean):
        raise ConfigurationError(
            f"samples_per_domain ({n}) exceeds clean set size ({len(clean)})")

    def make_loader(name: str):
        spec = CorruptionSpec(name, seed=cfg.seed)

        def load():
            x = synthesize_corruption(clean.images[:n], spec, cfg.severity)
            return x, clean.labels[:n].clone()
        return load

    for name in cfg.corruptions:
        domains.append(Domain(name=name, severity=cfg.severity, loader=make_loader(name)))
    return DomainStream(domains, cfg.batch_size, provenance="synthetic")

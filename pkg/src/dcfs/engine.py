"""Online continual adaptation over a domain stream.

Each batch is predicted first (pre-update) and then used for one
self-supervised update; no state is ever reset at domain boundaries.
Strategies: the dual-path method itself plus source / batch-norm /
entropy-minimization baselines.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import (Backbone, Checkpoint, SwitchableBatchNorm2d,
                       backbone_from_checkpoint, set_norm_mode)
from .cdm import CdmConfig, loss_cdm
from .disentangle import FeatureDisentangler
from .errors import ConfigurationError, NumericError
from .fdc import loss_fdc
from .heads import DualHead, PredictionBundle
from .scl import AugmentPolicy, ConfidenceState, loss_scl
from .streams import DomainStream

STRATEGIES = ("dcfs", "source", "bn_adapt", "tent")

RUN_RECORD_FIELDS = ("step", "domain", "severity", "batch_error", "loss_total",
                     "loss_fdc", "loss_cdm", "loss_scl", "mu_t", "sigma2_t",
                     "mean_weight")


@dataclass
class EngineConfig:
    strategy: str = "dcfs"
    lambda_cdm: float = 1.0
    lambda_scl: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 200
    seed: int = 0
    mixup_alpha: float = 1.0
    cdm_reg_weight: float = 0.1
    ema_momentum: float = 0.999
    attention_reduction: int = 8
    max_weight: float = 1.0
    enable_mixup: bool = True
    symmetric_consistency: bool = False
    hard_pseudo_labels: bool = False
    per_batch_class_mean: bool = False
    save_final_state: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.lambda_cdm < 0 or self.lambda_scl < 0:
            raise ConfigurationError("loss tradeoff factors must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OnlineResult:
    """Per-domain online error rates and the per-batch adaptation log."""

    strategy: str
    domains: list[tuple[str, int]]
    per_domain_errors: list[float]  # percent, stream order
    mean_error: float               # unweighted mean over domains
    records: list[dict]
    predictions: torch.Tensor | None = None  # concatenated, in-memory only

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy,
            "domains": [list(d) for d in self.domains],
            "per_domain_errors": self.per_domain_errors,
            "mean_error": self.mean_error,
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "OnlineResult":
        obj = json.loads(text)
        return cls(strategy=obj["strategy"],
                   domains=[tuple(d) for d in obj["domains"]],
                   per_domain_errors=obj["per_domain_errors"],
                   mean_error=obj["mean_error"], records=[])


class DcfsModel(nn.Module):
    """Backbone + attention gate + dual heads wired for adaptation.

    The gate and the semantic head train together with the feature
    extractor; the domain head and the backbone's own linear classifier
    stay frozen.
    """

    def __init__(self, backbone: Backbone, reduction: int = 8, seed: int = 0):
        super().__init__()
        self.backbone = backbone
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.disentangler = FeatureDisentangler(backbone.pooled_dim, reduction)
        self.head = DualHead.from_classifier(backbone.classifier)
        self.backbone.classifier.weight.requires_grad_(False)
        self.backbone.classifier.bias.requires_grad_(False)
        self.eval()

    def forward_bundles(self, x: torch.Tensor):
        bundle = self.disentangler.disentangle(self.backbone.features(x))
        return bundle, self.head.predict_bundle(bundle)

    def predict_whole_from(self, x: torch.Tensor) -> torch.Tensor:
        return self.head.predict_whole(self.backbone.features(x))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def adapted_state_arrays(self) -> dict[str, np.ndarray]:
        """State dict remapped to the checkpoint naming convention."""
        remap = {"disentangler.gate.": "attn/", "head.semantic.": "head_S/",
                 "head.domain.": "head_D/", "backbone.": "backbone/"}
        arrays = {}
        for name, tensor in self.state_dict().items():
            for prefix, replacement in remap.items():
                if name.startswith(prefix):
                    name = replacement + name[len(prefix):]
                    break
            arrays[name] = tensor.detach().cpu().numpy().astype(np.float32)
        return arrays


def _make_optimizer(params, cfg: EngineConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr)


def _entropy_from_logits(logits: torch.Tensor) -> torch.Tensor:
    log_p = torch.log_softmax(logits, dim=1)
    return -(log_p.exp() * log_p).sum(dim=1).mean()


def collect_norm_affine_params(model: nn.Module) -> list[nn.Parameter]:
    params = []
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            params += [m.weight, m.bias]
    return params


@torch.no_grad()
def baseline_bn_adapt(x: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    """Forward under batch statistics, no parameter updates."""
    set_norm_mode(backbone, "batch_stats")
    return backbone(x).argmax(dim=1)


def baseline_tent(x: torch.Tensor, backbone: Backbone,
                  optimizer: torch.optim.Optimizer) -> tuple[torch.Tensor, float]:
    """One entropy-minimization step on the norm affine parameters;
    predictions come from the pre-update forward."""
    logits = backbone(x)
    preds = logits.argmax(dim=1)
    loss = _entropy_from_logits(logits)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return preds, float(loss.detach())


@dataclass
class StepOutput:
    predictions: torch.Tensor
    whole_predictions: torch.Tensor
    losses: dict[str, float]
    state: ConfidenceState
    info: dict[str, float]


def _batch_diagnostics(x: torch.Tensor) -> dict[str, float]:
    return {"mean": float(x.mean()), "std": float(x.std()),
            "min": float(x.min()), "max": float(x.max())}


def adapt_step_dcfs(model: DcfsModel, optimizer: torch.optim.Optimizer,
                    x: torch.Tensor, state: ConfidenceState, cfg: EngineConfig,
                    mix_rng: np.random.Generator, aug_gen: torch.Generator
                    ) -> StepOutput:
    """One online step: predict, compute the three losses, update.

    The recorded predictions are the combined-branch argmax from the
    forward that precedes the parameter update.
    """
    _, preds_bundle = model.forward_bundles(x)
    pb: PredictionBundle = preds_bundle
    predictions = pb.combined_probs.argmax(dim=1)
    whole_predictions = pb.whole_probs.argmax(dim=1)

    fdc, fdc_parts = loss_fdc(model, x, pb.combined_probs, pb.whole_probs,
                              mix_rng, alpha=cfg.mixup_alpha,
                              symmetric=cfg.symmetric_consistency,
                              enable_mixup=cfg.enable_mixup)
    cdm = loss_cdm(pb.semantic_probs, pb.domain_probs,
                   model.head.semantic.weight, model.head.domain.weight,
                   CdmConfig(cfg.cdm_reg_weight))
    scl, new_state, scl_info = loss_scl(
        model, x, state, cfg.augment, aug_gen,
        pseudo_probs=pb.whole_probs,
        hard_labels=cfg.hard_pseudo_labels,
        per_batch_class_mean=cfg.per_batch_class_mean)

    total = fdc + cfg.lambda_cdm * cdm + cfg.lambda_scl * scl
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite adaptation loss (fdc={float(fdc.detach())}, "
            f"cdm={float(cdm.detach())}, scl={float(scl.detach())}); "
            f"batch stats: {_batch_diagnostics(x)}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    losses = {"total": float(total.detach()), "fdc": float(fdc.detach()),
              "cdm": float(cdm.detach()), "scl": float(scl.detach()),
              **{f"fdc_{k}": v for k, v in fdc_parts.items()}}
    return StepOutput(predictions=predictions, whole_predictions=whole_predictions,
                      losses=losses, state=new_state, info=scl_info)


def _write_run_record(records: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in RUN_RECORD_FIELDS}) + "\n")


def run_stream(stream: DomainStream, cfg: EngineConfig, checkpoint: Checkpoint,
               out_dir: str | Path | None = None, return_model: bool = False):
    """Run the online protocol over the whole stream.

    Returns an OnlineResult (and, when asked, the adapted model). When
    `out_dir` is given, writes `run_record.jsonl` and `result.json` there.
    """
    backbone = backbone_from_checkpoint(checkpoint)
    num_classes = backbone.num_classes

    model: nn.Module = backbone
    optimizer = None
    conf_state = None
    mix_rng = np.random.default_rng(cfg.seed)
    aug_gen = torch.Generator().manual_seed(cfg.seed)

    if cfg.strategy == "source":
        set_norm_mode(backbone, "source_stats")
    else:
        set_norm_mode(backbone, "batch_stats")
    if cfg.strategy == "tent":
        optimizer = _make_optimizer(collect_norm_affine_params(backbone), cfg)
    elif cfg.strategy == "dcfs":
        model = DcfsModel(backbone, reduction=cfg.attention_reduction, seed=cfg.seed)
        optimizer = _make_optimizer(model.trainable_parameters(), cfg)
        conf_state = ConfidenceState.initial(num_classes,
                                             momentum=cfg.ema_momentum,
                                             max_weight=cfg.max_weight)

    records: list[dict] = []
    all_preds: list[torch.Tensor] = []
    domains: list[tuple[str, int]] = []
    domain_wrong: list[int] = []
    domain_total: list[int] = []
    step = 0
    for dom, x, y in stream.iter_batches():
        if int(y.max()) >= num_classes:
            raise ConfigurationError(
                f"stream labels reach {int(y.max())} but model has "
                f"{num_classes} classes")
        key = (dom.name, dom.severity)
        if key not in domains:
            domains.append(key)
            domain_wrong.append(0)
            domain_total.append(0)
        di = domains.index(key)

        losses = {"total": 0.0, "fdc": 0.0, "cdm": 0.0, "scl": 0.0}
        info = {"mu_t": 0.0, "sigma2_t": 0.0, "mean_weight": 0.0}
        if cfg.strategy == "source":
            with torch.no_grad():
                preds = backbone(x).argmax(dim=1)
        elif cfg.strategy == "bn_adapt":
            preds = baseline_bn_adapt(x, backbone)
        elif cfg.strategy == "tent":
            preds, ent = baseline_tent(x, backbone, optimizer)
            losses["total"] = ent
        else:
            out = adapt_step_dcfs(model, optimizer, x, conf_state, cfg,
                                  mix_rng, aug_gen)
            preds, conf_state = out.predictions, out.state
            losses.update({k: out.losses[k] for k in ("total", "fdc", "cdm", "scl")})
            info = out.info

        wrong = int((preds != y).sum())
        all_preds.append(preds.detach().clone())
        domain_wrong[di] += wrong
        domain_total[di] += y.shape[0]
        records.append({
            "step": step, "domain": dom.name, "severity": dom.severity,
            "batch_error": 100.0 * wrong / y.shape[0],
            "loss_total": losses["total"], "loss_fdc": losses["fdc"],
            "loss_cdm": losses["cdm"], "loss_scl": losses["scl"],
            "mu_t": info["mu_t"], "sigma2_t": info["sigma2_t"],
            "mean_weight": info["mean_weight"],
        })
        step += 1

    per_domain_errors = [100.0 * w / t for w, t in zip(domain_wrong, domain_total)]
    result = OnlineResult(
        strategy=cfg.strategy, domains=domains,
        per_domain_errors=per_domain_errors,
        mean_error=float(np.mean(per_domain_errors)), records=records,
        predictions=torch.cat(all_preds))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_run_record(records, out / "run_record.jsonl")
        (out / "result.json").write_text(result.to_json())
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2))
        if cfg.save_final_state and cfg.strategy == "dcfs":
            Checkpoint(model.adapted_state_arrays(),
                       {"strategy": cfg.strategy}).save(out / "adapted_state.npz")
    if return_model:
        return result, model
    return result

"""Continual test-time adaptation toolkit.

Dual-path feature disentanglement with consistency learning, a classifier
discrepancy regularizer, and confidence-weighted self-training over an
online corruption stream, plus source / batch-norm / entropy baselines.
"""

from .backbone import (Backbone, Checkpoint, SmallCnn, WideResNet28,
                       build_backbone, backbone_from_checkpoint,
                       global_avg_pool, pretrain_source, set_norm_mode)
from .cdm import CdmConfig, loss_cdm
from .data import LabeledDataset, make_shape_dataset
from .disentangle import CoordinateGate, FeatureBundle, FeatureDisentangler
from .engine import (DcfsModel, EngineConfig, OnlineResult, adapt_step_dcfs,
                     baseline_bn_adapt, baseline_tent, run_stream)
from .errors import ConfigurationError, DataError, NumericError
from .fdc import (MixupConfig, cross_entropy, loss_fdc, loss_mixup,
                  loss_single, mixup_batch, mixup_pair)
from .heads import DualHead, PredictionBundle, combine
from .reporting import SummaryTable, emit_ablation, emit_table, error_rate, sweep_plot
from .scl import (AugmentPolicy, ConfidenceState, batch_stats, ema_update,
                  loss_scl, sample_weight, scl_core, uniform_align)
from .streams import (BENCHMARK_CORRUPTIONS, SYNTHETIC_CORRUPTIONS,
                      CorruptionSpec, Domain, DomainStream, StreamConfig,
                      build_stream, load_corruption_files,
                      synthesize_corruption)

__all__ = [name for name in dir() if not name.startswith("_")]

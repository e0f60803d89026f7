"""Command-line entry point: pretrain, adapt, ablate, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 data/model mismatch,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

from .backbone import Checkpoint, build_backbone, pretrain_source
from .config import RunConfig, load_config
from .data import make_shape_dataset
from .engine import OnlineResult, run_stream
from .errors import ConfigurationError, DataError, NumericError
from .reporting import emit_ablation, emit_table, sweep_plot
from .streams import StreamConfig, build_stream

DEFAULT_SWEEP_GRID = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)


def _make_train_dataset(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind != "synthetic":
        raise ConfigurationError("pretraining is only supported for synthetic datasets")
    return make_shape_dataset(ds.train_samples, ds.num_classes, ds.image_size,
                              seed=ds.data_seed)


def _make_stream(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind == "files":
        return build_stream(StreamConfig(
            corruptions=list(ds.corruptions), severity=ds.severity,
            batch_size=cfg.optimizer.batch_size, root=ds.root))
    clean = make_shape_dataset(ds.samples_per_domain, ds.num_classes,
                               ds.image_size, seed=ds.stream_seed)
    return build_stream(StreamConfig(
        corruptions=list(ds.corruptions), severity=ds.severity,
        batch_size=cfg.optimizer.batch_size, clean=clean,
        samples_per_domain=ds.samples_per_domain, seed=cfg.seed))


def cmd_pretrain(cfg: RunConfig) -> int:
    cfg.require("output_dir", "model.checkpoint")
    dataset = _make_train_dataset(cfg)
    backbone = build_backbone(cfg.model.arch, cfg.dataset.num_classes, seed=cfg.seed,
                              **({"widen_factor": cfg.model.widen_factor}
                                 if cfg.model.arch == "wrn28" else {}))
    ckpt = pretrain_source(backbone, dataset, epochs=cfg.pretrain.epochs,
                           seed=cfg.seed, lr=cfg.pretrain.lr,
                           batch_size=cfg.pretrain.batch_size)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(cfg.model.checkpoint)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(ckpt_path)
    print(f"checkpoint written to {ckpt_path} "
          f"(clean accuracy {float(ckpt.meta['clean_accuracy']):.4f})")
    return 0


def _adapt_once(cfg: RunConfig, out_dir: Path) -> OnlineResult:
    ckpt = Checkpoint.load(cfg.model.checkpoint)
    stream = _make_stream(cfg)
    return run_stream(stream, cfg.engine_config(), ckpt, out_dir=out_dir)


def cmd_adapt(cfg: RunConfig) -> int:
    cfg.require("output_dir", "model.checkpoint")
    out = Path(cfg.output_dir)
    result = _adapt_once(cfg, out)
    emit_table([result], out / "summary.csv")
    print(f"strategy={result.strategy} mean_error={result.mean_error:.2f}%")
    for (name, sev), err in zip(result.domains, result.per_domain_errors):
        print(f"  {name}(s{sev}): {err:.1f}%")
    return 0


ABLATION_CONFIGS = (
    ("source", {"strategy": "source"}),
    ("+fdc", {"strategy": "dcfs", "lambda_cdm": 0.0, "lambda_scl": 0.0}),
    ("+fdc+cdm", {"strategy": "dcfs", "lambda_scl": 0.0}),
    ("+fdc+scl", {"strategy": "dcfs", "lambda_cdm": 0.0}),
    ("full", {"strategy": "dcfs"}),
)


def cmd_ablate(cfg: RunConfig) -> int:
    cfg.require("output_dir", "model.checkpoint")
    out = Path(cfg.output_dir)
    results = []
    for name, patch in ABLATION_CONFIGS:
        variant = dataclasses.replace(cfg, method=dataclasses.replace(cfg.method, **patch))
        sub = out / f"ablate_{name.replace('+', 'p')}"
        results.append(_adapt_once(variant, sub))
        print(f"{name}: mean_error={results[-1].mean_error:.2f}%")
    emit_ablation(results, out / "ablation.csv")
    return 0


def cmd_sweep(cfg: RunConfig, param: str, values: list[float]) -> int:
    cfg.require("output_dir", "model.checkpoint")
    if param not in ("lambda_cdm", "lambda_scl"):
        raise ConfigurationError(f"sweep param must be lambda_cdm|lambda_scl, got {param!r}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pairs = []
    rows = []
    for value in values:
        variant = dataclasses.replace(
            cfg, method=dataclasses.replace(cfg.method, **{param: value}))
        result = _adapt_once(variant, out / f"sweep_{param}_{value}")
        pairs.append((value, result.mean_error))
        rows.append((variant.method.lambda_cdm, variant.method.lambda_scl,
                     cfg.seed, result.mean_error))
        print(f"{param}={value}: mean_error={result.mean_error:.2f}%")
    with open(out / f"sweep_{param}_runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda_cdm", "lambda_scl", "seed", "mean_error"])
        writer.writerows(rows)
    spread = sweep_plot(pairs, out / f"sweep_{param}.png",
                        out / f"sweep_{param}.csv", param_name=param)
    print(f"sweep spread (max-min): {spread:.2f} points")
    return 0


def cmd_report(run_dirs: list[str], out_path: str) -> int:
    results = []
    for d in run_dirs:
        path = Path(d) / "result.json"
        if not path.exists():
            raise DataError(f"no result.json under {d}")
        results.append(OnlineResult.from_json(path.read_text()))
    emit_table(results, out_path)
    print(f"summary written to {out_path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcfs",
                                     description="continual test-time adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")

    add_common(sub.add_parser("pretrain", help="train and save a source checkpoint"))

    p_adapt = sub.add_parser("adapt", help="run one online adaptation")
    add_common(p_adapt)
    p_adapt.add_argument("--strategy", default=None,
                         help="override method.strategy")

    add_common(sub.add_parser("ablate", help="run the five-configuration ablation"))

    p_sweep = sub.add_parser("sweep", help="sensitivity sweep over a tradeoff factor")
    add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=["lambda_cdm", "lambda_scl"])
    p_sweep.add_argument("--values", type=float, nargs="+",
                         default=list(DEFAULT_SWEEP_GRID))

    p_report = sub.add_parser("report", help="combine run results into one table")
    p_report.add_argument("--runs", nargs="+", required=True)
    p_report.add_argument("--out", required=True)
    return parser


def _load_with_flags(args) -> RunConfig:
    cfg = load_config(args.config, overrides=args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "strategy", None) is not None:
        cfg.method.strategy = args.strategy
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.runs, args.out)
        cfg = _load_with_flags(args)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.param, args.values)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

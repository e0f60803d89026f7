"""Error-rate tables, ablation summaries and sensitivity-sweep outputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import OnlineResult
from .errors import DataError

ABLATION_ROWS = ("source", "+fdc", "+fdc+cdm", "+fdc+scl", "full")


def error_rate(predictions, labels) -> float:
    """Percentage of mismatches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise DataError(
            f"predictions ({predictions.shape}) and labels ({labels.shape}) "
            "must be equal-length and non-empty")
    return 100.0 * float(np.count_nonzero(predictions != labels)) / predictions.size


@dataclass
class SummaryTable:
    columns: list[str]                       # corruption names, stream order
    rows: dict[str, list[float]] = field(default_factory=dict)  # method -> errors
    metadata: dict[str, str] = field(default_factory=dict)

    def mean(self, method: str) -> float:
        return float(np.mean(self.rows[method]))


def emit_table(results: list[OnlineResult], out_path: str | Path,
               method_names: list[str] | None = None) -> SummaryTable:
    """Write a method-by-corruption error CSV (one decimal) plus Mean."""
    if not results:
        raise DataError("no results to tabulate")
    domains = results[0].domains
    for r in results[1:]:
        if r.domains != domains:
            raise DataError("results cover different domain sequences")
    columns = [name for name, _ in domains]
    names = method_names or [r.strategy for r in results]
    table = SummaryTable(columns=columns)
    for name, r in zip(names, results):
        table.rows[name] = list(r.per_domain_errors)

    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *columns, "mean"])
        for name in names:
            errs = table.rows[name]
            writer.writerow([name, *(f"{e:.1f}" for e in errs),
                             f"{float(np.mean(errs)):.1f}"])
    return table


def load_table(path: str | Path) -> SummaryTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        table = SummaryTable(columns=header[1:-1])
        for row in reader:
            table.rows[row[0]] = [float(v) for v in row[1:-1]]
    return table


def emit_ablation(results: list[OnlineResult], out_path: str | Path) -> SummaryTable:
    """Five-row ablation table: source, each partial configuration, full."""
    if len(results) != len(ABLATION_ROWS):
        raise DataError(
            f"ablation expects {len(ABLATION_ROWS)} results, got {len(results)}")
    return emit_table(results, out_path, method_names=list(ABLATION_ROWS))


def sweep_plot(pairs: list[tuple[float, float]], out_png: str | Path,
               out_csv: str | Path, param_name: str = "lambda") -> float:
    """Line plot + CSV of mean error vs. parameter value; returns the
    max-min spread of the sweep."""
    if len(pairs) < 1:
        raise DataError("sweep needs at least one point")
    values = [p[0] for p in pairs]
    errors = [p[1] for p in pairs]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([param_name, "mean_error"])
        for v, e in pairs:
            writer.writerow([v, e])

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, errors, marker="o")
    ax.set_xlabel(param_name)
    ax.set_ylabel("mean error (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return float(max(errors) - min(errors))

"""Metrics, two-model ensemble averaging and plot-ready exports.

MAPE uses a max(|y|, 1) denominator guard so zero-engagement rows stay
finite; counts below 1 other than 0 cannot occur, so the guard only ever
kicks in at zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MissingTarget, RowIdMismatch
from .ingest import TARGETS


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error, in percent: 100*mean(|y-p|/max(|y|,1))."""
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.shape != p.shape:
        raise LengthMismatch(f"shapes differ: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise LengthMismatch("empty vectors")
    denom = np.maximum(np.abs(y), 1.0)
    return float(100.0 * np.mean(np.abs(y - p) / denom))


def mse(y_true, y_pred) -> float:
    y = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if y.shape != p.shape:
        raise LengthMismatch(f"shapes differ: {y.shape} vs {p.shape}")
    if y.size == 0:
        raise LengthMismatch("empty vectors")
    return float(np.mean((y - p) ** 2))


@dataclass
class PredictionSet:
    """Raw-scale predictions for a set of rows, one vector per target."""

    row_ids: list[str]
    values: dict[str, np.ndarray]


@dataclass
class EnsembleOutput:
    averaged: PredictionSet
    member_a: PredictionSet
    member_b: PredictionSet


def average_ensemble(pred_a: PredictionSet, pred_b: PredictionSet) -> EnsembleOutput:
    """Elementwise arithmetic mean of two members, in raw scale.

    Members are retained for audit. Row ids must align exactly.
    """
    if pred_a.row_ids != pred_b.row_ids:
        raise RowIdMismatch("ensemble members cover different rows")
    if set(pred_a.values) != set(pred_b.values):
        raise RowIdMismatch("ensemble members cover different targets")
    averaged = {
        t: (np.asarray(pred_a.values[t], dtype=np.float64) + np.asarray(pred_b.values[t], dtype=np.float64)) / 2.0
        for t in pred_a.values
    }
    return EnsembleOutput(
        averaged=PredictionSet(row_ids=list(pred_a.row_ids), values=averaged),
        member_a=pred_a,
        member_b=pred_b,
    )


@dataclass
class MetricReport:
    label: str
    per_target: dict[str, dict[str, float]]  # target -> {"mape": %, "mse": raw}
    n_rows: int = 0


_LEADERBOARD_ORDER = ("comment", "heart", "play", "share")


def leaderboard_rows(reports: list[MetricReport]) -> list[list[str]]:
    """CSV rows (header included): model label + per-target MAPE, 2 decimals."""
    if not reports:
        raise MissingTarget("no metric reports to tabulate")
    rows = [["model"] + [t.capitalize() for t in _LEADERBOARD_ORDER]]
    for rep in reports:
        for t in _LEADERBOARD_ORDER:
            if t not in rep.per_target:
                raise MissingTarget(f"report {rep.label!r} lacks target {t!r}")
        rows.append([rep.label] + [f"{rep.per_target[t]['mape']:.2f}" for t in _LEADERBOARD_ORDER])
    return rows


def render_leaderboard(reports: list[MetricReport]) -> str:
    """Aligned text table of per-target MAPE percentages."""
    rows = leaderboard_rows(reports)
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [r[c].rjust(widths[c]) for c in range(1, len(r))]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def write_leaderboard_csv(reports: list[MetricReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(leaderboard_rows(reports))


# --- prediction density export ------------------------------------------------


def density_bins(series: dict[str, np.ndarray], n_bins: int = 64) -> dict:
    """Histogram counts over shared log-scale bins covering [0, max].

    Bin edges are expm1 of an even grid over log1p space, shared by every
    series so the distributions are directly comparable. The final bin is
    right-inclusive; counts per series always sum to that series' length.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in series.items()}
    if not arrays or any(a.size == 0 for a in arrays.values()):
        raise LengthMismatch("density export requires non-empty prediction vectors")
    top = max(float(a.max()) for a in arrays.values())
    if top <= 0.0:
        edges = np.zeros(n_bins + 1)
        counts = {k: np.zeros(n_bins, dtype=np.int64) for k in arrays}
        for k, a in arrays.items():
            counts[k][0] = a.size
        return {"edges": edges, "counts": counts}
    edges = np.expm1(np.linspace(0.0, np.log1p(top), n_bins + 1))
    edges[0] = 0.0
    edges[-1] = top
    counts = {k: np.histogram(a, bins=edges)[0] for k, a in arrays.items()}
    return {"edges": edges, "counts": counts}


def write_density_csv(series: dict[str, np.ndarray], path: str | Path, n_bins: int = 64) -> None:
    """Long-format CSV: series,bin_index,bin_lo,bin_hi,count."""
    binned = density_bins(series, n_bins)
    edges = binned["edges"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series", "bin_index", "bin_lo", "bin_hi", "count"])
        for name in sorted(binned["counts"]):
            for i, c in enumerate(binned["counts"][name]):
                writer.writerow([name, i, repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])


def metric_report(label: str, y_by_target: dict[str, np.ndarray], preds: PredictionSet) -> MetricReport:
    per_target = {}
    for t in TARGETS:
        per_target[t] = {
            "mape": mape(y_by_target[t], preds.values[t]),
            "mse": mse(y_by_target[t], preds.values[t]),
        }
    return MetricReport(label=label, per_target=per_target, n_rows=len(preds.row_ids))

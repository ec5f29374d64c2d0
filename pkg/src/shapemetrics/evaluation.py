"""Accuracy and uncertainty reporting for trained size regressors.

Turns (ground truth, prediction) pairs into the numbers quoted in result
tables: MAE, RMSE, MAPE (mean / median / inter-quartile range), per-sample
relative errors, histograms of relative error split by ground-truth
magnitude, and the rank correlation between predicted spread and realised
absolute error.  Everything here is pure float bookkeeping; no autodiff.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, DataError

__all__ = [
    "EvalRecord",
    "MetricSummary",
    "Histogram",
    "summarize",
    "split_histogram",
    "confidence_error_association",
    "save_records",
    "load_records",
    "save_summary",
    "save_histograms",
    "RECORD_COLUMNS",
]

RECORD_COLUMNS = (
    "shape_id",
    "gt",
    "pred_mu",
    "pred_log_var",
    "abs_err",
    "rel_err_pct",
    "confidence",
)


@dataclass(frozen=True)
class EvalRecord:
    """One shape's ground truth vs. prediction, with derived error fields.

    ``confidence`` is the reporting transform exp(-log_var); the association
    test below uses sigma = exp(log_var / 2) directly, which is
    monotone-equivalent.
    """

    shape_id: str
    gt: float
    pred_mu: float
    pred_log_var: float
    abs_err: float
    rel_err_pct: float
    confidence: float

    @classmethod
    def from_prediction(cls, shape_id, gt, pred_mu, pred_log_var) -> "EvalRecord":
        gt = float(gt)
        pred_mu = float(pred_mu)
        pred_log_var = float(pred_log_var)
        if not (
            math.isfinite(gt) and math.isfinite(pred_mu) and math.isfinite(pred_log_var)
        ):
            raise DataError(f"non-finite evaluation inputs for shape {shape_id!r}")
        if gt <= 0.0:
            raise DataError(
                f"ground truth must be positive, got {gt!r} for shape {shape_id!r}"
            )
        abs_err = abs(gt - pred_mu)
        return cls(
            shape_id=str(shape_id),
            gt=gt,
            pred_mu=pred_mu,
            pred_log_var=pred_log_var,
            abs_err=abs_err,
            rel_err_pct=100.0 * abs_err / gt,
            confidence=math.exp(-pred_log_var),
        )

    @property
    def sigma(self) -> float:
        return math.exp(0.5 * self.pred_log_var)


@dataclass(frozen=True)
class MetricSummary:
    mae: float
    rmse: float
    mape_mean: float
    mape_median: float
    mape_iqr: tuple  # (q25, q75) of per-sample relative error, percent
    n: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "mape_mean": self.mape_mean,
            "mape_median": self.mape_median,
            "mape_q25": self.mape_iqr[0],
            "mape_q75": self.mape_iqr[1],
            "n": self.n,
        }


def summarize(records) -> MetricSummary:
    """Aggregate per-sample records into the standard summary metrics.

    Quantiles interpolate linearly between order statistics, so q25 <=
    median <= q75 holds by construction and a single record reports its own
    relative error in every MAPE slot.
    """
    records = list(records)
    if not records:
        raise DataError("summarize needs at least one record")
    abs_err = np.array([r.abs_err for r in records], dtype=np.float64)
    rel = np.array([r.rel_err_pct for r in records], dtype=np.float64)
    q25, med, q75 = np.quantile(rel, [0.25, 0.5, 0.75])
    return MetricSummary(
        mae=float(abs_err.mean()),
        rmse=float(np.sqrt(np.mean(abs_err * abs_err))),
        mape_mean=float(rel.mean()),
        mape_median=float(med),
        mape_iqr=(float(q25), float(q75)),
        n=len(records),
    )


@dataclass(frozen=True)
class Histogram:
    """Counts of per-sample relative error over fixed-width bins.

    ``edges`` has ``len(counts) + 1`` entries and is shared between the two
    halves of a split so the plots overlay.  ``mean``/``median`` are markers
    for external plotting; NaN when the partition is empty.
    """

    edges: np.ndarray
    counts: np.ndarray
    mean: float
    median: float
    n: int


def split_histogram(records, threshold, bins: int = 20):
    """Histogram relative errors separately for gt > threshold and gt <= it.

    Both histograms use the same fixed-width bins over [0, max rel_err] of
    the full record list, so counts are directly comparable.  Returns
    (above, below); counts sum to len(records) across the pair.
    """
    bins = int(bins)
    if bins < 1:
        raise ConfigError(f"bins must be >= 1, got {bins}")
    records = list(records)
    rel_all = np.array([r.rel_err_pct for r in records], dtype=np.float64)
    hi = float(rel_all.max()) if rel_all.size else 1.0
    if hi <= 0.0:
        hi = 1.0  # all-zero errors still need a nonzero bin width
    edges = np.linspace(0.0, hi, bins + 1)

    def build(part):
        vals = np.array([r.rel_err_pct for r in part], dtype=np.float64)
        counts, _ = np.histogram(vals, bins=edges)
        mean = float(vals.mean()) if vals.size else float("nan")
        median = float(np.median(vals)) if vals.size else float("nan")
        return Histogram(edges=edges, counts=counts, mean=mean, median=median, n=len(part))

    threshold = float(threshold)
    above = [r for r in records if r.gt > threshold]
    below = [r for r in records if r.gt <= threshold]
    return build(above), build(below)


def confidence_error_association(records) -> float:
    """Spearman rank correlation between predicted sigma and absolute error.

    A positive value means the model's spread widens where it is actually
    wrong.  Undefined (NaN) when either column is constant, since ranks
    carry no information there.
    """
    records = list(records)
    if len(records) < 5:
        raise DataError(
            f"association needs at least 5 records, got {len(records)}"
        )
    sigma = np.array([r.sigma for r in records], dtype=np.float64)
    err = np.array([r.abs_err for r in records], dtype=np.float64)
    if np.all(sigma == sigma[0]) or np.all(err == err[0]):
        return float("nan")
    rho = stats.spearmanr(sigma, err).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# file formats: records CSV, summary JSON, histogram CSV


def save_records(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.shape_id,
                    repr(r.gt),
                    repr(r.pred_mu),
                    repr(r.pred_log_var),
                    repr(r.abs_err),
                    repr(r.rel_err_pct),
                    repr(r.confidence),
                ]
            )


def load_records(path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise DataError(
                f"unexpected record columns in {path}: {reader.fieldnames!r}"
            )
        out = []
        for row in reader:
            out.append(
                EvalRecord(
                    shape_id=row["shape_id"],
                    gt=float(row["gt"]),
                    pred_mu=float(row["pred_mu"]),
                    pred_log_var=float(row["pred_log_var"]),
                    abs_err=float(row["abs_err"]),
                    rel_err_pct=float(row["rel_err_pct"]),
                    confidence=float(row["confidence"]),
                )
            )
    return out


def save_summary(summary: MetricSummary, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_histograms(above: Histogram, below: Histogram, path) -> None:
    """One CSV row per (partition, bin); mean/median markers repeat per row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["partition", "bin_left", "bin_right", "count", "mean", "median", "n"]
        )
        for name, h in (("above", above), ("below", below)):
            for i in range(len(h.counts)):
                writer.writerow(
                    [
                        name,
                        repr(float(h.edges[i])),
                        repr(float(h.edges[i + 1])),
                        int(h.counts[i]),
                        repr(h.mean),
                        repr(h.median),
                        h.n,
                    ]
                )

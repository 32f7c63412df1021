"""Ranking metrics, odds segments, prediction histograms and cohort reports.

Reports are written as one JSON document plus two-column TSV series files
(``x<TAB>y`` with a header line) that any plotting tool can read.
"""

from __future__ import annotations

import json
import math
import operator
import os
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .calibration import CalibrationCurve, calibration_curve, ece

REPORT_FORMAT = "clickpredict.eval_report"
REPORT_VERSION = 1


class MetricError(ValueError):
    pass


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(x)]])
    ranks = np.empty(len(x))
    # mean of ranks start+1..end, exact in binary floating point (k or k+0.5)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def auc(predictions, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted as half."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes")
    r = average_ranks(p)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class OddsSegment:
    bucket_index: int
    count: int
    positive_rate: float
    odds_ratio: float


def odds_segments(predictions, labels, n_segments: int = 5) -> list[OddsSegment]:
    """Split predictions (high to low) into near-equal buckets with odds vs. base rate.

    Earlier (higher-prediction) buckets take the remainder. Predictions tied
    across a bucket boundary share their group's positive rate, so the split
    never depends on the arbitrary order of equal scores.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(np.float64)
    n = len(p)
    if n < n_segments or n_segments < 1:
        raise MetricError(f"need at least {n_segments} predictions")
    base = y.mean()
    if base == 0:
        raise MetricError("base rate is zero")
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    # replace each label by its tie-group mean
    boundaries = np.flatnonzero(np.diff(ps)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    group_rate = np.add.reduceat(ys, starts) / (ends - starts)
    yt = np.repeat(group_rate, ends - starts)
    out = []
    for i, chunk in enumerate(np.array_split(np.arange(n), n_segments)):
        rate = float(yt[chunk].mean())
        out.append(OddsSegment(i, len(chunk), rate, rate / base))
    return out


def format_odds(seg: OddsSegment) -> str:
    return f"{seg.odds_ratio:.2f}×"


def prediction_distribution(predictions, n_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram over [0, 1]. Returns ``(counts, edges)``."""
    p = np.asarray(predictions, dtype=np.float64)
    counts, edges = np.histogram(p, bins=n_bins, range=(0.0, 1.0))
    return counts, edges


_COMPARATORS = {
    ">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le,
    "==": operator.eq, "!=": operator.ne,
}
_CLAUSE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(>=|<=|==|!=|>|<)\s*(-?[0-9.eE+-]+)\s*$")


def parse_predicate(text: str) -> Callable[[Mapping[str, float]], bool]:
    """Parse ``"click_count > 10 AND time_on_site > 60"`` into a stats predicate.

    Clauses are joined with ``AND``; ``true`` selects everything. A name that
    is not a stats key is retried with a ``_seconds`` suffix.
    """
    text = text.strip()
    if text.lower() in ("", "true", "all"):
        return lambda stats: True
    clauses = []
    for part in re.split(r"\s+AND\s+", text, flags=re.IGNORECASE):
        m = _CLAUSE.match(part)
        if not m:
            raise ValueError(f"cannot parse predicate clause {part!r}")
        clauses.append((m.group(1), _COMPARATORS[m.group(2)], float(m.group(3))))

    def pred(stats: Mapping[str, float]) -> bool:
        for name, op, value in clauses:
            key = name if name in stats else f"{name}_seconds"
            if key not in stats:
                raise KeyError(f"unknown stat {name!r}")
            if not op(stats[key], value):
                return False
        return True

    pred.text = text  # type: ignore[attr-defined]
    return pred


@dataclass(frozen=True)
class CohortReport:
    n: int
    positives: int
    calibration_curve: CalibrationCurve
    top_decile_positive_rate: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "positives": self.positives,
            "top_decile_positive_rate": self.top_decile_positive_rate,
            "calibration_curve": self.calibration_curve.to_dict(),
        }


def top_fraction_positive_rate(predictions, labels, fraction: float = 0.1) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels)
    k = max(1, math.ceil(len(p) * fraction))
    order = np.argsort(-p, kind="stable")
    return float(y[order[:k]].mean())


def cohort_report(predictions, labels, stats: Sequence[Mapping[str, float]],
                  predicate: Callable[[Mapping[str, float]], bool] | str,
                  min_positives: int = 100) -> CohortReport:
    if isinstance(predicate, str):
        predicate = parse_predicate(predicate)
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    sel = np.array([bool(predicate(s)) for s in stats], dtype=bool)
    if not sel.any():
        raise MetricError("cohort predicate selected no examples")
    ps, ys = p[sel], y[sel]
    return CohortReport(
        n=int(sel.sum()),
        positives=int(ys.sum()),
        calibration_curve=calibration_curve(ps, ys, min_positives),
        top_decile_positive_rate=top_fraction_positive_rate(ps, ys, 0.1),
    )


@dataclass
class EvalReport:
    auc: float
    ece: float
    calibration_curve: CalibrationCurve
    odds_segments: list[OddsSegment]
    prediction_histogram: list[int]
    histogram_edges: list[float]
    cohort_reports: dict[str, CohortReport] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "auc": self.auc,
            "ece": self.ece,
            "calibration_curve": self.calibration_curve.to_dict(),
            "odds_segments": [s.__dict__.copy() for s in self.odds_segments],
            "odds_labels": [format_odds(s) for s in self.odds_segments],
            "prediction_histogram": {"counts": self.prediction_histogram, "edges": self.histogram_edges},
            "cohort_reports": {k: v.to_dict() for k, v in self.cohort_reports.items()},
            **self.extra,
        }


def evaluate(probs, labels, stats: Sequence[Mapping[str, float]] | None = None,
             cohorts: Mapping[str, str] | None = None, n_bins: int = 10, min_positives: int = 100,
             n_segments: int = 5, hist_bins: int = 20) -> EvalReport:
    """Full report for ``(n, 2)`` class probabilities (or positive-class probs)."""
    P = np.asarray(probs, dtype=np.float64)
    pos = P[:, 1] if P.ndim == 2 else P
    y = np.asarray(labels).astype(int)
    counts, edges = prediction_distribution(pos, hist_bins)
    report = EvalReport(
        auc=auc(pos, y),
        ece=ece(P, y, n_bins),
        calibration_curve=calibration_curve(pos, y, min_positives),
        odds_segments=odds_segments(pos, y, n_segments),
        prediction_histogram=[int(c) for c in counts],
        histogram_edges=[float(e) for e in edges],
    )
    for name, pred in (cohorts or {}).items():
        report.cohort_reports[name] = cohort_report(pos, y, stats or [], pred, min_positives)
    return report


def write_series(path, xs, ys, header=("x", "y")) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{header[0]}\t{header[1]}\n")
        for x, y in zip(xs, ys):
            fh.write(f"{x!r}\t{y!r}\n")


def _curve_series(out_dir, prefix, curve: CalibrationCurve) -> list[str]:
    """Per-bucket "predictions" and "actual" curves, plus actual against predicted."""
    idx = list(range(len(curve.buckets)))
    names = [f"{prefix}calibration.tsv", f"{prefix}calibration_predicted.tsv",
             f"{prefix}calibration_actual.tsv"]
    write_series(os.path.join(out_dir, names[0]), curve.conf, curve.actual, ("predicted", "actual"))
    write_series(os.path.join(out_dir, names[1]), idx, curve.conf, ("bucket", "predicted"))
    write_series(os.path.join(out_dir, names[2]), idx, curve.actual, ("bucket", "actual"))
    return names


def write_report(report: EvalReport, out_dir, name: str = "report") -> list[str]:
    """Write ``<name>.json`` and its series files; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    files = [f"{name}.json"]
    with open(os.path.join(out_dir, files[0]), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    files += _curve_series(out_dir, "", report.calibration_curve)
    write_series(os.path.join(out_dir, "odds_segments.tsv"),
                 [s.bucket_index for s in report.odds_segments],
                 [s.odds_ratio for s in report.odds_segments], ("segment", "odds_ratio"))
    centers = [(a + b) / 2 for a, b in zip(report.histogram_edges, report.histogram_edges[1:])]
    write_series(os.path.join(out_dir, "prediction_distribution.tsv"), centers,
                 report.prediction_histogram, ("prediction", "count"))
    files += ["odds_segments.tsv", "prediction_distribution.tsv"]
    for cname, cr in report.cohort_reports.items():
        files += _curve_series(out_dir, f"cohort_{cname}_", cr.calibration_curve)
    return files

"""Calibration error, calibration curves and matrix-scaling recalibration."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class CalibrationError(ValueError):
    pass


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_prob_matrix(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        # positive-class probabilities
        p = np.stack([1.0 - p, p], axis=1)
    return p


def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error with max-probability confidences.

    ``probs`` is ``(n, k)`` class probabilities, or a 1-D array of
    positive-class probabilities for a binary problem. Samples fall into
    bins ``((m-1)/M, m/M]``; empty bins contribute nothing.
    """
    p = _as_prob_matrix(probs)
    labels = np.asarray(labels)
    if len(p) == 0:
        raise CalibrationError("ECE of an empty prediction set")
    if n_bins < 1:
        raise CalibrationError("need at least one bin")
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = len(p)
    total = 0.0
    for m in range(n_bins):
        sel = bins == m
        k = int(sel.sum())
        if k:
            total += k / n * abs(correct[sel].mean() - conf[sel].mean())
    return total


@dataclass(frozen=True)
class CurveBucket:
    count: int
    positive_count: int
    conf: float
    actual: float
    min_pred: float
    max_pred: float


@dataclass(frozen=True)
class CalibrationCurve:
    buckets: tuple[CurveBucket, ...]
    insufficient_positives: bool = False

    @property
    def conf(self) -> list[float]:
        return [b.conf for b in self.buckets]

    @property
    def actual(self) -> list[float]:
        return [b.actual for b in self.buckets]

    def to_dict(self) -> dict:
        return {
            "insufficient_positives": self.insufficient_positives,
            "buckets": [b.__dict__.copy() for b in self.buckets],
        }


def _bucket(p, y) -> CurveBucket:
    return CurveBucket(
        count=len(p),
        positive_count=int(y.sum()),
        conf=float(p.mean()),
        actual=float(y.mean()),
        min_pred=float(p.min()),
        max_pred=float(p.max()),
    )


def calibration_curve(predictions, labels, min_positives: int = 100) -> CalibrationCurve:
    """Variable-width buckets over predictions sorted high to low.

    Each bucket grows until it holds ``min_positives`` positives; whatever is
    left at the end forms the last bucket. With fewer than ``min_positives``
    positives overall a single bucket is returned and flagged.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if len(p) == 0:
        return CalibrationCurve((), insufficient_positives=True)
    order = np.argsort(-p, kind="stable")
    p, y = p[order], y[order]
    if y.sum() < min_positives:
        warnings.warn(f"only {int(y.sum())} positives, calibration curve has a single bucket")
        return CalibrationCurve((_bucket(p, y),), insufficient_positives=True)
    cum = np.cumsum(y)
    buckets = []
    start = 0
    while start < len(p):
        # first index where this bucket reaches min_positives
        target = (cum[start - 1] if start else 0) + min_positives
        hit = int(np.searchsorted(cum, target, side="left"))
        end = len(p) if hit >= len(p) else hit + 1
        buckets.append(_bucket(p[start:end], y[start:end]))
        start = end
    return CalibrationCurve(tuple(buckets))


@dataclass
class MatrixScaling:
    W: np.ndarray = field(default_factory=lambda: np.eye(2))
    b: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise CalibrationError("non-finite matrix scaling parameters")

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MatrixScaling":
        return cls(np.array(d["W"]), np.array(d["b"]))


def apply_matrix_scaling(z, ms: MatrixScaling) -> np.ndarray:
    """``softmax(W z + b)`` for one logit vector or a batch of them."""
    z = np.asarray(z, dtype=np.float64)
    return _softmax(z @ ms.W.T + ms.b)


def fit_holdout_split(labels, fit_fraction: float = 0.5, seed: int = 0):
    """Stratified, seeded split of a validation set into fit/hold-out halves."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fit, hold = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * fit_fraction))
        fit.extend(idx[:k])
        hold.extend(idx[k:])
    return np.sort(np.asarray(fit, dtype=int)), np.sort(np.asarray(hold, dtype=int))


def fit_matrix_scaling(logits, labels, lr: float = 0.1, decay: float = 0.5, decay_every: int = 200,
                       steps: int = 1000) -> MatrixScaling:
    """Gradient descent on mean cross-entropy over all given logits."""
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if len(np.unique(y)) < 2:
        raise CalibrationError("matrix scaling needs both classes in the fit set")
    n, k = Z.shape
    Y = np.zeros((n, k))
    Y[np.arange(n), y] = 1.0
    W = np.eye(k)
    b = np.zeros(k)
    rate = lr
    for step in range(steps):
        if step and step % decay_every == 0:
            rate *= decay
        P = _softmax(Z @ W.T + b)
        G = (P - Y) / n
        W -= rate * (G.T @ Z)
        b -= rate * G.sum(axis=0)
    return MatrixScaling(W, b)


def matrix_scaling_fit(logits, labels, fit_fraction: float = 0.5, seed: int = 0, **schedule) -> MatrixScaling:
    """Fit on the seeded ``fit_fraction`` share; the rest stays for reporting.

    Use :func:`fit_holdout_split` with the same arguments to recover the
    held-out indices.
    """
    fit_idx, _ = fit_holdout_split(labels, fit_fraction, seed)
    Z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    return fit_matrix_scaling(Z[fit_idx], y[fit_idx], **schedule)

"""Exact PR/ROC metrics over pooled pixel scores.

AUC_ROC is computed from integer pair statistics — (2*concordant + ties)
over 2*P*N — with a single float division at the end, so it agrees exactly
with pair-counting and is immune to sweep accumulation error.  The division
is canonicalized so that auc(scores) + auc(1 - scores) == 1.0 holds exactly
in floating point: the smaller of the two complementary numerators is the
one divided, and the larger side is produced as 1 - that quotient.

AUC_PR uses the right-step convention: sum of (recall_i - recall_{i-1}) *
precision_i over thresholds swept descending with tied scores grouped.
"""

from __future__ import annotations

import csv
import os
from typing import NamedTuple, Sequence

import numpy as np


class MetricError(ValueError):
    """Raised when a requested metric is undefined for the given labels."""


class CurvePoint(NamedTuple):
    threshold: float
    precision: float
    recall: float
    fpr: float
    tpr: float


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    uniq = np.unique(y)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"labels must be binary 0/1, found {uniq[:5]}")
    return s, y.astype(np.int64)


def _grouped_counts(s, y):
    """Distinct scores descending with positive/negative counts per group."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    boundaries = np.flatnonzero(np.diff(s_sorted)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    pos_cum = np.concatenate(([0], np.cumsum(y_sorted)))
    group_pos = pos_cum[ends] - pos_cum[starts]
    group_tot = ends - starts
    return s_sorted[starts], group_pos, group_tot - group_pos


def roc_pair_stats(scores, labels) -> tuple[int, int]:
    """Integer statistic (2*concordant + ties, 2*P*N) for ROC area.

    A pair is one (positive, negative) pixel pairing; concordant means the
    positive scored strictly higher.
    """
    s, y = _validate(scores, labels)
    p_total = int(y.sum())
    n_total = int(y.size - p_total)
    if p_total == 0 or n_total == 0:
        raise MetricError("ROC undefined: labels contain only one class")
    _, gp, gn = _grouped_counts(s, y)
    concordant = 0
    ties = 0
    pos_above = 0
    for p_i, n_i in zip(gp.tolist(), gn.tolist()):
        concordant += pos_above * n_i
        ties += p_i * n_i
        pos_above += p_i
    return 2 * concordant + ties, 2 * p_total * n_total


def _auc_from_pairs(u2: int, denom: int) -> float:
    small = min(u2, denom - u2)
    q = small / denom
    return q if 2 * u2 <= denom else 1.0 - q


def auc_roc(scores, labels) -> float:
    """Area under ROC == (concordant + 0.5*ties) / (P*N), exactly."""
    u2, denom = roc_pair_stats(scores, labels)
    return _auc_from_pairs(u2, denom)


def pr_roc_curve(scores, labels) -> list[CurvePoint]:
    """Precision/recall/FPR/TPR at each distinct score, swept descending.

    Tied scores form a single operating point (they cannot be separated by
    any threshold).  Requires at least one positive and one negative label.
    """
    s, y = _validate(scores, labels)
    p_total = int(y.sum())
    n_total = int(y.size - p_total)
    if p_total == 0 or n_total == 0:
        raise MetricError("ROC undefined: labels contain only one class")
    thresholds, gp, gn = _grouped_counts(s, y)
    tp = np.cumsum(gp)
    fp = np.cumsum(gn)
    points = []
    for t, tp_i, fp_i in zip(thresholds.tolist(), tp.tolist(), fp.tolist()):
        points.append(CurvePoint(
            threshold=t,
            precision=tp_i / (tp_i + fp_i),
            recall=tp_i / p_total,
            fpr=fp_i / n_total,
            tpr=tp_i / p_total,
        ))
    return points


def auc_pr(scores, labels) -> float:
    """Right-step area: sum over thresholds of (R_i - R_{i-1}) * P_i, R_0 = 0.

    Defined whenever at least one positive exists (an all-positive input has
    precision 1 at every threshold and area 1).
    """
    s, y = _validate(scores, labels)
    p_total = int(y.sum())
    if p_total == 0:
        raise MetricError("PR undefined: no positive labels")
    _, gp, gn = _grouped_counts(s, y)
    tp = np.cumsum(gp)
    fp = np.cumsum(gn)
    recall = tp / p_total
    precision = tp / (tp + fp)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * precision))


# -- pooled per-class evaluation ---------------------------------------------

def per_class_aucs(probs: Sequence[np.ndarray], labels: Sequence[np.ndarray],
                   class_names: Sequence[str], *, skip: Sequence[int] = (),
                   per_image: bool = False) -> dict[str, tuple[float, float]]:
    """One-vs-rest (AUC_PR, AUC_ROC) per class over a set of images.

    probs: per image a (K, H, W) array of class scores; labels: per image an
    (H, W) integer map.  The default pools all pixels of all images into one
    score set per class; ``per_image=True`` instead macro-averages per-image
    AUCs over the images where the class is defined.  A class undefined in
    the whole set (absent, or for ROC absent/every pixel) yields NaNs.
    """
    if len(probs) != len(labels):
        raise ValueError("probs and labels differ in length")
    out: dict[str, tuple[float, float]] = {}
    for k, name in enumerate(class_names):
        if k in skip:
            continue
        if per_image:
            prs, rocs = [], []
            for p, lab in zip(probs, labels):
                try:
                    prs.append(auc_pr(p[k], (lab == k).astype(np.int64)))
                    rocs.append(auc_roc(p[k], (lab == k).astype(np.int64)))
                except MetricError:
                    continue
            out[name] = (float(np.mean(prs)) if prs else float("nan"),
                         float(np.mean(rocs)) if rocs else float("nan"))
        else:
            s = np.concatenate([p[k].ravel() for p in probs])
            yk = np.concatenate([(lab == k).ravel() for lab in labels]).astype(np.int64)
            try:
                pr = auc_pr(s, yk)
            except MetricError:
                pr = float("nan")
            try:
                roc = auc_roc(s, yk)
            except MetricError:
                roc = float("nan")
            out[name] = (pr, roc)
    return out


# -- CSV output ---------------------------------------------------------------

def _atomic_writer(path):
    return _AtomicFile(path)


class _AtomicFile:
    """Write to <path>.tmp then rename, so readers never see partial rows."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.tmp = self.path + ".tmp"

    def __enter__(self):
        self.fh = open(self.tmp, "w", newline="")
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_curve_csv(path, points: Sequence[CurvePoint]):
    with _atomic_writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "fpr", "tpr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall),
                        repr(p.fpr), repr(p.tpr)])


def write_summary_csv(path, aucs: dict[str, tuple[float, float]]):
    with _atomic_writer(path) as fh:
        w = csv.writer(fh)
        w.writerow(["class", "auc_pr", "auc_roc"])
        for name, (pr, roc) in aucs.items():
            w.writerow([name, repr(pr), repr(roc)])

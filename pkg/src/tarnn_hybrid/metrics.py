"""Classification metrics and significance statistics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import stats as _stats

from .errors import DegenerateTestError, UndefinedMetricError


def fbeta(precision: float, recall: float, beta: float = 2.0) -> float:
    """F-beta score; 0 when precision and recall are both 0."""
    b2 = beta * beta
    denom = b2 * precision + recall
    if denom == 0:
        return 0.0
    return (1 + b2) * precision * recall / denom


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with tied scores counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = _stats.rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float) -> Tuple[int, int, int, int]:
    """``(tp, fp, tn, fn)`` with positive prediction when ``score >= threshold``."""
    pred = np.asarray(scores) >= threshold
    labels = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    tn = int(np.sum(~pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, fp, tn, fn


def _ratio(num, den):
    return num / den if den else 0.0


@dataclass
class MetricReport:
    accuracy: float
    auc: float
    precision: float
    recall: float
    f1: float
    f2: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp, fp, tn, fn, threshold, auc_value=float("nan")) -> "MetricReport":
        total = tp + fp + tn + fn
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        return cls(
            accuracy=_ratio(tp + tn, total),
            auc=auc_value,
            precision=precision,
            recall=recall,
            f1=fbeta(precision, recall, 1.0),
            f2=fbeta(precision, recall, 2.0),
            threshold=float(threshold),
            tp=tp, fp=fp, tn=tn, fn=fn,
        )

    def to_dict(self) -> Dict:
        return asdict(self)


def metric_report(scores, labels, threshold: float) -> MetricReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise UndefinedMetricError("empty evaluation set")
    try:
        auc_value = auc(scores, labels)
    except UndefinedMetricError:
        auc_value = float("nan")
    return MetricReport.from_counts(*confusion(scores, labels, threshold), threshold, auc_value)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Paired t statistic on ``a - b`` and its two-sided p-value (n - 1 dof)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DegenerateTestError("paired t-test needs two equal-length samples with n >= 2")
    diff = a - b
    sd = diff.std(ddof=1)
    if sd == 0:
        raise DegenerateTestError("differences have zero variance; t statistic undefined")
    n = len(diff)
    t = diff.mean() / (sd / math.sqrt(n))
    p = 2.0 * _stats.t.sf(abs(t), n - 1)
    return float(t), float(p)


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """Standardized mean difference using the pooled (unbiased) standard deviation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateTestError("Cohen's d needs at least two values per group")
    pooled = ((len(a) - 1) * a.var(ddof=1) + (len(b) - 1) * b.var(ddof=1)) / (len(a) + len(b) - 2)
    if pooled == 0:
        raise DegenerateTestError("pooled standard deviation is zero")
    return float((a.mean() - b.mean()) / math.sqrt(pooled))

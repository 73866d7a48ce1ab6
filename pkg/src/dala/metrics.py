"""Imbalance-aware classification metrics and heatmap-overlap metrics.

Conventions that matter for imbalanced data:

* 0/0 rates (e.g. sensitivity with no positive samples) are reported as
  ``None`` ("undefined"), never silently as 0, so aggregates like GMean
  and IBA cannot be quietly inflated.
* GMean excludes zero-support classes (with a warning) and collapses to
  0 the moment any scored class has zero recall.
* The F1 report carries both the macro and the support-weighted value,
  printed as a "macro/weighted" pair.
* AUC is the rank-based (Mann-Whitney) statistic with half credit for
  ties; multi-class AUC is the unweighted one-vs-rest macro average.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import InputError

__all__ = [
    "ConfusionMatrix",
    "ScoredPrediction",
    "BinaryRates",
    "F1Summary",
    "HeatmapMetrics",
    "confusion",
    "binary_rates",
    "accuracy",
    "f1_scores",
    "f1_pair",
    "gmean",
    "iba",
    "auc_roc",
    "heatmap_metrics",
    "binarize_cam_for_eval",
    "classification_report",
    "report_csv_header",
    "report_csv_row",
]


@dataclass(frozen=True)
class ScoredPrediction:
    """One sample: its true label and the model's per-class scores."""

    label: int
    scores: tuple[float, ...]


@dataclass(frozen=True)
class HeatmapEvalPair:
    """Predicted and ground-truth binary masks of equal size."""

    pred: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        if np.asarray(self.pred).shape != np.asarray(self.truth).shape:
            raise InputError(
                f"mask sizes differ: {np.asarray(self.pred).shape} vs "
                f"{np.asarray(self.truth).shape}"
            )


class ConfusionMatrix:
    """K x K counts; cell (i, j) counts true class i predicted as j."""

    def __init__(self, counts, class_names: Optional[Sequence[str]] = None):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise InputError(f"confusion matrix must be square, got {counts.shape}")
        if counts.shape[0] < 1:
            raise InputError("confusion matrix must be non-empty")
        if np.any(counts < 0):
            raise InputError("confusion matrix counts must be non-negative")
        self.counts = counts
        self.class_names = (
            list(class_names)
            if class_names is not None
            else [str(i) for i in range(counts.shape[0])]
        )
        if len(self.class_names) != counts.shape[0]:
            raise InputError("one class name per class required")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self, cls: int) -> int:
        return int(self.counts[cls].sum())

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def confusion(preds, truths, num_classes: int, class_names=None) -> ConfusionMatrix:
    """Exact count matrix from parallel label vectors."""
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape or preds.ndim != 1:
        raise InputError("preds and truths must be equal-length vectors")
    if preds.size and (preds.min() < 0 or preds.max() >= num_classes):
        raise InputError(f"predictions outside [0, {num_classes})")
    if truths.size and (truths.min() < 0 or truths.max() >= num_classes):
        raise InputError(f"truths outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts, class_names)


@dataclass(frozen=True)
class BinaryRates:
    """One-vs-rest rates; None marks an undefined 0/0 ratio."""

    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def binary_rates(cm: ConfusionMatrix, positive_class: int) -> BinaryRates:
    """Sensitivity, specificity, PPV, NPV of one class against the rest."""
    if not 0 <= positive_class < cm.num_classes:
        raise InputError(f"positive class {positive_class} out of range")
    c = cm.counts
    tp = int(c[positive_class, positive_class])
    fn = int(c[positive_class].sum() - tp)
    fp = int(c[:, positive_class].sum() - tp)
    tn = int(c.sum() - tp - fn - fp)
    return BinaryRates(
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        ppv=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise InputError("cannot score an empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


@dataclass(frozen=True)
class F1Summary:
    macro: float
    weighted: float
    per_class: tuple[float, ...]


def f1_scores(cm: ConfusionMatrix) -> F1Summary:
    """Per-class F1 (0 when precision+recall is 0), macro and
    support-weighted means."""
    if cm.total == 0:
        raise InputError("cannot score an empty confusion matrix")
    c = cm.counts
    per_class = []
    for k in range(cm.num_classes):
        tp = int(c[k, k])
        denom = int(c[k].sum()) + int(c[:, k].sum())  # 2TP + FN + FP
        per_class.append(0.0 if denom == 0 else 2.0 * tp / denom)
    per_class = tuple(per_class)
    supports = c.sum(axis=1)
    macro = float(np.mean(per_class))
    weighted = float(np.sum(np.asarray(per_class) * supports) / supports.sum())
    return F1Summary(macro=macro, weighted=weighted, per_class=per_class)


def f1_pair(cm: ConfusionMatrix) -> str:
    """The 'macro/weighted' dual report, three decimals each."""
    s = f1_scores(cm)
    return f"{s.macro:.3f}/{s.weighted:.3f}"


def _recalls(cm: ConfusionMatrix) -> list[Optional[float]]:
    return [
        _ratio(int(cm.counts[k, k]), cm.support(k)) for k in range(cm.num_classes)
    ]


def gmean(cm: ConfusionMatrix) -> float:
    """Geometric mean of per-class recalls; zero-support classes are
    excluded (with a warning), any zero recall collapses the mean to 0."""
    recalls = _recalls(cm)
    scored = [r for r in recalls if r is not None]
    if len(scored) < len(recalls):
        warnings.warn(
            f"gmean: excluded {len(recalls) - len(scored)} zero-support class(es)",
            stacklevel=2,
        )
    if not scored:
        raise InputError("gmean needs at least one class with support")
    if any(r == 0.0 for r in scored):
        return 0.0
    return float(np.exp(np.mean(np.log(scored))))


def _iba_one_vs_rest(cm: ConfusionMatrix, positive: int, alpha: float) -> Optional[float]:
    rates = binary_rates(cm, positive)
    if rates.sensitivity is None or rates.specificity is None:
        return None
    dominance = rates.sensitivity - rates.specificity
    return (1.0 + alpha * dominance) * rates.sensitivity * rates.specificity


def iba(cm: ConfusionMatrix, alpha: float = 0.1, positive_class: int = 1) -> float:
    """Index of balanced accuracy.

    Binary: (1 + alpha*(sens - spec)) * sens * spec with the designated
    positive class.  Multi-class: unweighted mean of the one-vs-rest
    values; classes whose rates are undefined are excluded with a warning.
    """
    if cm.num_classes < 2:
        raise InputError("iba needs at least two classes")
    if cm.num_classes == 2:
        value = _iba_one_vs_rest(cm, positive_class, alpha)
        if value is None:
            raise InputError("iba undefined: a one-vs-rest rate is 0/0")
        return value
    values = [_iba_one_vs_rest(cm, k, alpha) for k in range(cm.num_classes)]
    scored = [v for v in values if v is not None]
    if len(scored) < len(values):
        warnings.warn(
            f"iba: excluded {len(values) - len(scored)} class(es) with undefined rates",
            stacklevel=2,
        )
    if not scored:
        raise InputError("iba undefined for every class")
    return float(np.mean(scored))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg = starts + (counts + 1) / 2.0
    return avg[inverse]


def _auc_binary(scores: np.ndarray, positives: np.ndarray) -> float:
    n_pos = int(positives.sum())
    n_neg = int(positives.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs at least one positive and one negative sample")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_roc(labels, scores=None, positive_class: Optional[int] = None) -> float:
    """Rank-based AUC.  ``scores`` is (N, K) per-class scores.  With a
    positive class given, the binary one-vs-rest AUC of that class;
    otherwise the unweighted macro average over all classes.

    Also accepts a sequence of :class:`ScoredPrediction` as the sole
    data argument."""
    if scores is None:
        preds = list(labels)
        if not preds or not isinstance(preds[0], ScoredPrediction):
            raise InputError("auc_roc needs (labels, scores) or ScoredPredictions")
        labels = [p.label for p in preds]
        scores = [p.scores for p in preds]
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise InputError("scores must be (N, K) aligned with labels")
    if not np.all(np.isfinite(scores)):
        raise InputError("scores must be finite")
    if positive_class is not None:
        return _auc_binary(scores[:, positive_class], labels == positive_class)
    values = []
    for k in range(scores.shape[1]):
        positives = labels == k
        if positives.any() and (~positives).any():
            values.append(_auc_binary(scores[:, k], positives))
    if not values:
        raise InputError("AUC needs at least one class with both outcomes")
    return float(np.mean(values))


@dataclass(frozen=True)
class HeatmapMetrics:
    iou: float
    dice: float
    recall: float
    f1: float


def heatmap_metrics(pred_mask, truth_mask) -> HeatmapMetrics:
    """Region-overlap scores between binary masks of equal size.

    F1 is computed from pixel precision and recall; for sets it coincides
    with Dice, and both columns are reported.
    """
    pred = np.asarray(pred_mask, dtype=bool)
    truth = np.asarray(truth_mask, dtype=bool)
    if pred.shape != truth.shape:
        raise InputError(f"mask sizes differ: {pred.shape} vs {truth.shape}")
    n_truth = int(truth.sum())
    if n_truth == 0:
        raise InputError("ground-truth mask is empty")
    n_pred = int(pred.sum())
    inter = int((pred & truth).sum())
    union = int((pred | truth).sum())
    iou = inter / union
    dice = 2.0 * inter / (n_pred + n_truth)
    recall = inter / n_truth
    if n_pred == 0:
        f1 = 0.0
    else:
        precision = inter / n_pred
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return HeatmapMetrics(iou=iou, dice=dice, recall=recall, f1=f1)


def binarize_cam_for_eval(cam, mode: str = "support", threshold: float = 0.5) -> np.ndarray:
    """Binary prediction mask from a heatmap.

    ``support`` takes the map's own strict-positivity support (the
    dynamic-threshold pipeline's output mask); ``fixed`` min-max
    normalizes and thresholds at ``threshold`` (the plain-CAM baseline).
    """
    values = cam.values if hasattr(cam, "values") else np.asarray(cam)
    if mode == "support":
        return values > 0
    if mode == "fixed":
        lo, hi = values.min(), values.max()
        if hi > lo:
            normalized = (values - lo) / (hi - lo)
        elif hi > 0:
            normalized = np.ones_like(values)
        else:
            normalized = np.zeros_like(values)
        return normalized > threshold
    raise InputError(f"unknown binarization mode {mode!r}")


def classification_report(cm: ConfusionMatrix, labels=None, scores=None) -> dict:
    """Aggregate + per-class JSON-ready report; AUC included when scores
    are supplied."""
    def defined(fn):
        try:
            return fn(cm)
        except InputError:
            return None

    f1 = f1_scores(cm)
    report = {
        "accuracy": accuracy(cm),
        "f1_macro": f1.macro,
        "f1_weighted": f1.weighted,
        "f1": f1_pair(cm),
        "iba": defined(iba),
        "gmean": defined(gmean),
        "auc_roc": None,
        "num_samples": cm.total,
        "confusion_matrix": cm.counts.tolist(),
        "class_names": list(cm.class_names),
        "per_class": {},
    }
    if labels is not None and scores is not None:
        report["auc_roc"] = auc_roc(labels, scores)
    for k, name in enumerate(cm.class_names):
        rates = binary_rates(cm, k)
        report["per_class"][name] = {
            "support": cm.support(k),
            "sensitivity": rates.sensitivity,
            "specificity": rates.specificity,
            "ppv": rates.ppv,
            "npv": rates.npv,
            "f1": f1.per_class[k],
        }
    return report


_AGGREGATE_COLUMNS = ["accuracy", "f1_macro", "f1_weighted", "iba", "gmean", "auc_roc"]
_RATE_COLUMNS = ["sensitivity", "specificity", "ppv", "npv"]


def report_csv_header(report: dict) -> list[str]:
    """Stable flat column order: aggregates, then per-class rates in
    class order."""
    header = ["num_samples", *_AGGREGATE_COLUMNS]
    for name in report["class_names"]:
        header.extend(f"{name}_{rate}" for rate in _RATE_COLUMNS)
    return header


def report_csv_row(report: dict) -> list[str]:
    def fmt(v):
        return "" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v)

    row = [fmt(report["num_samples"])]
    row.extend(fmt(report[c]) for c in _AGGREGATE_COLUMNS)
    for name in report["class_names"]:
        per = report["per_class"][name]
        row.extend(fmt(per[rate]) for rate in _RATE_COLUMNS)
    return row

"""Evaluation metrics: confusion matrix, quadratic weighted kappa,
macro one-vs-one AUC, Dice, IoU, and the aggregate classification report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import FormatError, MaskImage, PredictionMatrix, ValidationError


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = number of items with true class i predicted as j."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValidationError("confusion matrix must be square")
        if np.any(counts < 0):
            raise ValidationError("confusion matrix counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValidationError(
            f"label sequences must be 1-D and equal length: {y_true.shape} vs {y_pred.shape}"
        )
    if y_true.size < 1:
        raise ValidationError("need at least one sample")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if np.any(arr < 0) or np.any(arr >= num_classes):
            raise ValidationError(f"{name} label outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _quadratic_weights(num_classes: int) -> np.ndarray:
    if num_classes < 2:
        return np.zeros((num_classes, num_classes))
    idx = np.arange(num_classes, dtype=np.float64)
    return (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2


def quadratic_weighted_kappa(cm: ConfusionMatrix) -> float:
    """Chance-corrected agreement with squared-distance disagreement weights.

    Returns exactly 1.0 when the weighted observed disagreement is zero,
    which covers both perfect agreement and the degenerate all-one-class
    case (0/0, resolved to 1.0 by convention).
    """
    n = cm.n
    if n < 1:
        raise ValidationError("kappa needs at least one sample")
    w = _quadratic_weights(cm.num_classes)
    observed = cm.counts / n
    numerator = float((w * observed).sum())
    if numerator == 0.0:
        return 1.0
    row = cm.counts.sum(axis=1) / n
    col = cm.counts.sum(axis=0) / n
    expected = np.outer(row, col)
    denominator = float((w * expected).sum())
    return 1.0 - numerator / denominator


def kappa_is_degenerate(cm: ConfusionMatrix) -> bool:
    """True when both marginals put all mass on the same single class."""
    w = _quadratic_weights(cm.num_classes)
    row = cm.counts.sum(axis=1)
    col = cm.counts.sum(axis=0)
    return float((w * np.outer(row, col)).sum()) == 0.0


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def pairwise_auc(y_true: Sequence[int], probs: np.ndarray) -> tuple[dict[tuple[int, int], float], list[tuple[int, int]]]:
    """Hand-Till pairwise AUC values plus the list of excluded class pairs.

    For each unordered pair (i, j) with samples on both sides, A(i|j) is the
    rank AUC of the class-i score on the i-vs-j subset (ties credit 1/2) and
    the pair value is (A(i|j) + A(j|i)) / 2. Pairs missing a side are skipped.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != y_true.size:
        raise ValidationError("probabilities must align with the label sequence")
    k = probs.shape[1]
    if np.any(y_true < 0) or np.any(y_true >= k):
        raise ValidationError(f"true label outside [0, {k})")
    values: dict[tuple[int, int], float] = {}
    excluded: list[tuple[int, int]] = []
    for i in range(k):
        for j in range(i + 1, k):
            mask_i = y_true == i
            mask_j = y_true == j
            n_i = int(mask_i.sum())
            n_j = int(mask_j.sum())
            if n_i == 0 or n_j == 0:
                excluded.append((i, j))
                continue
            subset = mask_i | mask_j
            is_i = mask_i[subset]
            a_ij = _rank_auc(probs[subset, i], is_i)
            a_ji = _rank_auc(probs[subset, j], ~is_i)
            values[(i, j)] = (a_ij + a_ji) / 2.0
    return values, excluded


def _rank_auc(scores: np.ndarray, is_positive: np.ndarray) -> float:
    n_pos = int(is_positive.sum())
    n_neg = scores.size - n_pos
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[is_positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auc_ovo(y_true: Sequence[int], probs: np.ndarray) -> float:
    """Macro average of Hand-Till pairwise AUCs over all scorable class pairs."""
    values, _ = pairwise_auc(y_true, probs)
    if not values:
        raise ValidationError("no class pair has samples on both sides")
    pairs = sorted(values)
    return sum(values[p] for p in pairs) / len(pairs)


def _check_mask_pair(a: MaskImage, b: MaskImage) -> None:
    if a.pixels.shape != b.pixels.shape:
        raise ValidationError(
            f"mask dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def dice_coefficient(a: MaskImage, b: MaskImage) -> float:
    """2|A&B| / (|A| + |B|); 1.0 when both masks are empty."""
    _check_mask_pair(a, b)
    pa, pb = a.popcount(), b.popcount()
    if pa + pb == 0:
        return 1.0
    inter = int((a.pixels & b.pixels).sum())
    return 2.0 * inter / (pa + pb)


def iou(a: MaskImage, b: MaskImage) -> float:
    """Intersection area over union area; 1.0 when both masks are empty."""
    _check_mask_pair(a, b)
    inter = int((a.pixels & b.pixels).sum())
    union = int((a.pixels | b.pixels).sum())
    if union == 0:
        return 1.0
    return inter / union


@dataclass(frozen=True)
class MetricReport:
    """Named metric values; segmentation fields stay None for classification."""

    kappa: float | None = None
    auc_ovo: float | None = None
    accuracy: float | None = None
    dice: float | None = None
    iou: float | None = None
    n: int = 0
    per_class: tuple[int, ...] = ()
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "kappa": self.kappa,
            "auc_ovo": self.auc_ovo,
            "accuracy": self.accuracy,
            "dice": self.dice,
            "iou": self.iou,
            "n": self.n,
            "per_class": list(self.per_class),
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        try:
            return cls(
                kappa=doc["kappa"],
                auc_ovo=doc["auc_ovo"],
                accuracy=doc["accuracy"],
                dice=doc["dice"],
                iou=doc["iou"],
                n=int(doc["n"]),
                per_class=tuple(int(c) for c in doc["per_class"]),
                flags=tuple(str(f) for f in doc["flags"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed metric report: {exc}") from exc


def write_report(path, report: MetricReport) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(report.to_json())


def read_report(path) -> MetricReport:
    try:
        with open(path, "r", encoding="ascii") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(str(path), "report", str(exc)) from exc
    if not isinstance(doc, dict):
        raise FormatError(str(path), "report", "expected a JSON object")
    try:
        return MetricReport.from_dict(doc)
    except ValidationError as exc:
        raise FormatError(str(path), "report", str(exc)) from exc


def evaluate_classification(y_true: Sequence[int], probs: np.ndarray) -> MetricReport:
    """Kappa on argmax predictions, macro-OvO AUC, and accuracy."""
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != y_true.size or y_true.size < 1:
        raise ValidationError("probabilities must align with a non-empty label sequence")
    k = probs.shape[1]
    y_pred = np.argmax(probs, axis=1)
    cm = confusion_matrix(y_true, y_pred, k)
    flags = []
    if kappa_is_degenerate(cm):
        flags.append("kappa_degenerate")
    kappa = quadratic_weighted_kappa(cm)
    pair_values, excluded = pairwise_auc(y_true, probs)
    for i, j in excluded:
        flags.append(f"auc_pair_excluded:{i}-{j}")
    if pair_values:
        pairs = sorted(pair_values)
        auc = sum(pair_values[p] for p in pairs) / len(pairs)
    else:
        auc = None
        flags.append("auc_undefined")
    accuracy = float(np.mean(y_true == y_pred))
    per_class = tuple(int(c) for c in np.bincount(y_true, minlength=k))
    return MetricReport(
        kappa=kappa,
        auc_ovo=auc,
        accuracy=accuracy,
        n=int(y_true.size),
        per_class=per_class,
        flags=tuple(flags),
    )


def evaluate_predictions(labels, preds: PredictionMatrix) -> MetricReport:
    """Align a LabelSet with a PredictionMatrix by the matrix row order."""
    missing = [i for i in preds.ids if i not in labels]
    if missing:
        raise ValidationError(f"no label for predicted id {missing[0]!r}")
    y_true = [labels.label_of(i) for i in preds.ids]
    return evaluate_classification(y_true, preds.probs)

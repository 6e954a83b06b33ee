"""Differentiable scalar training objectives with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` is the gradient with
respect to the pre-softmax logits of the batch. Reductions run in a fixed
left-to-right order so repeated evaluation is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import ValidationError
from .metrics import _quadratic_weights

LOG_CLAMP = 1e-12


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _softmax_backward(u: np.ndarray, grad_u: np.ndarray) -> np.ndarray:
    # d loss / d logits given d loss / d u, using only the softmax output u.
    inner = (grad_u * u).sum(axis=1, keepdims=True)
    return u * (grad_u - inner)


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValidationError("labels must be 1-D")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValidationError(f"label outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass(frozen=True)
class ProbBatch:
    """Softmax outputs paired with one-hot targets for one batch."""

    probs: np.ndarray    # (B, K) rows sum to 1
    targets: np.ndarray  # (B, K) one-hot

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if probs.ndim != 2 or probs.shape != targets.shape:
            raise ValidationError("probs and targets must share a (B, K) shape")
        if probs.shape[0] < 1:
            raise ValidationError("empty batch")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
            raise ValidationError("softmax rows must sum to 1 within 1e-6")
        if not np.all((targets == 0.0) | (targets == 1.0)) or np.any(targets.sum(axis=1) != 1.0):
            raise ValidationError("targets must be one-hot rows")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels: Sequence[int]) -> "ProbBatch":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(softmax(logits), one_hot(labels, logits.shape[1]))

    @classmethod
    def from_probs(cls, probs: np.ndarray, labels: Sequence[int]) -> "ProbBatch":
        probs = np.asarray(probs, dtype=np.float64)
        return cls(probs, one_hot(labels, probs.shape[1]))

    @property
    def size(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)


class CompositeMode(Enum):
    WCE_PLUS_LAMBDA_KAPPA = "wce_plus_kappa"
    ALPHA_BLEND = "alpha_blend"


@dataclass(frozen=True)
class CompositeSchedule:
    """Blend weights for composite objectives; alpha decays linearly."""

    lam: float = 1.0
    alpha_start: float = 1.0
    alpha_end: float = 0.0
    total_epochs: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be non-negative")
        if self.total_epochs < 1:
            raise ValidationError("total_epochs must be positive")

    def alpha(self, epoch: int) -> float:
        if not 0 <= epoch < self.total_epochs:
            raise ValidationError(f"epoch {epoch} outside [0, {self.total_epochs})")
        if self.total_epochs == 1:
            return self.alpha_start
        frac = epoch / (self.total_epochs - 1)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * frac


def validate_class_weights(weights, num_classes: int) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (num_classes,):
        raise ValidationError(f"class weights must have length {num_classes}")
    if np.any(weights <= 0.0) or not np.all(np.isfinite(weights)):
        raise ValidationError("class weights must be positive and finite")
    return weights


def inverse_frequency_weights(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Inverse class-frequency weights normalized to mean 1.

    Classes absent from ``labels`` get weight 1.0; they never contribute to
    a weighted cross entropy over those labels, so the value is immaterial.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    if counts.size > num_classes:
        raise ValidationError(f"label outside [0, {num_classes})")
    present = counts > 0
    weights = np.ones(num_classes, dtype=np.float64)
    raw = 1.0 / counts[present]
    weights[present] = raw * present.sum() / raw.sum()
    return weights


def cross_entropy(batch: ProbBatch, weights=None) -> tuple[float, np.ndarray]:
    """(Weighted) mean negative log-likelihood of the target class.

    With weights the mean is normalized by the summed per-sample weights;
    probabilities are clamped at 1e-12 before the log, and a clamped sample
    contributes zero gradient.
    """
    u, v = batch.probs, batch.targets
    if weights is None:
        w = np.ones(batch.num_classes, dtype=np.float64)
    else:
        w = validate_class_weights(weights, batch.num_classes)
    sample_w = w[batch.labels]
    p_target = (u * v).sum(axis=1)
    clamped = p_target < LOG_CLAMP
    value = float((sample_w * -np.log(np.maximum(p_target, LOG_CLAMP))).sum() / sample_w.sum())
    scale = (sample_w / sample_w.sum())[:, None]
    grad = scale * (u - v)
    grad[clamped] = 0.0
    return value, grad


def soft_kappa_loss(batch: ProbBatch) -> tuple[float, np.ndarray]:
    """One minus a differentiable quadratic-weighted-kappa surrogate.

    The observed matrix is the probability-weighted confusion O[i, j] =
    sum_n v[n, i] u[n, j] / B; the expected matrix is the outer product of
    the target marginals and the mean predicted probabilities.
    """
    u, v = batch.probs, batch.targets
    b, k = u.shape
    if b < 2:
        raise ValidationError("kappa loss needs a batch of at least 2 samples")
    if np.unique(batch.labels).size < 2:
        raise ValidationError("kappa undefined on degenerate batch (single target class)")
    w = _quadratic_weights(k)
    truth_marginal = v.sum(axis=0) / b
    mean_probs = u.sum(axis=0) / b
    observed = v.T @ u / b
    numerator = float((w * observed).sum())
    denominator = float((w * np.outer(truth_marginal, mean_probs)).sum())
    value = numerator / denominator

    # dN/du[n, j] = w[y_n, j] / B ; dD/du[n, j] = (w^T t)[j] / B
    dn_du = w[batch.labels] / b
    dd_du = np.broadcast_to(w.T @ truth_marginal / b, (b, k))
    grad_u = (dn_du * denominator - numerator * dd_du) / denominator ** 2
    return value, _softmax_backward(u, grad_u)


def dice_loss(batch: ProbBatch, *, include_background: bool) -> tuple[float, np.ndarray]:
    """Negative mean soft overlap ratio across classes, no smoothing term.

    Rows of the batch are pixels. Classes whose probability and target sums
    are both zero are skipped and the class count reduced; class 0 is
    skipped entirely when include_background is false.
    """
    u, v = batch.probs, batch.targets
    k = batch.num_classes
    classes = [c for c in range(k) if include_background or c != 0]
    numer = {c: float((u[:, c] * v[:, c]).sum()) for c in classes}
    denom = {c: float(u[:, c].sum() + v[:, c].sum()) for c in classes}
    included = [c for c in classes if denom[c] > 0.0]
    if not included:
        raise ValidationError("dice loss undefined: every class has an empty denominator")
    m = len(included)
    value = -2.0 / m * sum(numer[c] / denom[c] for c in included)
    grad_u = np.zeros_like(u)
    for c in included:
        grad_u[:, c] = -2.0 / m * (v[:, c] * denom[c] - numer[c]) / denom[c] ** 2
    return value, _softmax_backward(u, grad_u)


def composite_loss(
    batch: ProbBatch,
    schedule: CompositeSchedule,
    mode: CompositeMode,
    epoch: int,
    weights=None,
) -> tuple[float, np.ndarray]:
    """WCE + lambda * KappaLoss, or the linear alpha blend of the two.

    A term with coefficient exactly zero is skipped, so degenerate settings
    reproduce the surviving constituent bit-for-bit.
    """
    if mode is CompositeMode.WCE_PLUS_LAMBDA_KAPPA:
        wce_coeff, kappa_coeff = 1.0, schedule.lam
    elif mode is CompositeMode.ALPHA_BLEND:
        alpha = schedule.alpha(epoch)
        wce_coeff, kappa_coeff = alpha, 1.0 - alpha
    else:
        raise ValidationError(f"unknown composite mode {mode!r}")
    if kappa_coeff == 0.0:
        return cross_entropy(batch, weights)
    if wce_coeff == 0.0:
        return soft_kappa_loss(batch)
    wce_value, wce_grad = cross_entropy(batch, weights)
    kappa_value, kappa_grad = soft_kappa_loss(batch)
    value = wce_coeff * wce_value + kappa_coeff * kappa_value
    grad = wce_coeff * wce_grad + kappa_coeff * kappa_grad
    return value, grad

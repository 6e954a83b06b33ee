"""Loss values against hand computations; gradients against finite differences."""

import math

import numpy as np
import pytest

import oracles
from pseudovote.core import ValidationError
from pseudovote.losses import (
    LOG_CLAMP,
    CompositeMode,
    CompositeSchedule,
    ProbBatch,
    composite_loss,
    cross_entropy,
    dice_loss,
    inverse_frequency_weights,
    one_hot,
    soft_kappa_loss,
    softmax,
    validate_class_weights,
)


def grad_close(analytic, reference, tol=1e-4):
    scale = max(float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(analytic - reference))) / scale < tol


def mixed_labels(rng, b, k):
    """Random labels guaranteed to span at least two classes."""
    labels = rng.integers(0, k, b)
    labels[0], labels[1] = 0, 1
    return labels


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 4)) * 3
    u = softmax(logits)
    assert np.allclose(u.sum(axis=1), 1.0)
    assert np.allclose(softmax(logits + 100.0), u)


def test_one_hot():
    assert one_hot([2, 0], 3).tolist() == [[0, 0, 1], [1, 0, 0]]
    with pytest.raises(ValidationError):
        one_hot([3], 3)


def test_prob_batch_validation():
    with pytest.raises(ValidationError):
        ProbBatch(np.array([[0.7, 0.7]]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValidationError):
        ProbBatch(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
    batch = ProbBatch.from_logits(np.zeros((2, 3)), [1, 2])
    assert batch.size == 2 and batch.num_classes == 3
    assert batch.labels.tolist() == [1, 2]


def test_cross_entropy_known_value():
    batch = ProbBatch.from_probs(np.array([[0.5, 0.5], [0.25, 0.75]]), [0, 1])
    value, grad = cross_entropy(batch)
    assert value == pytest.approx((-math.log(0.5) - math.log(0.75)) / 2, abs=1e-15)
    expected = np.array([[-0.25, 0.25], [0.125, -0.125]])
    assert np.allclose(grad, expected, atol=1e-15)


def test_cross_entropy_clamp_zeroes_gradient():
    batch = ProbBatch.from_probs(np.array([[1.0, 0.0], [0.5, 0.5]]), [1, 0])
    value, grad = cross_entropy(batch)
    assert value == pytest.approx((-math.log(LOG_CLAMP) - math.log(0.5)) / 2)
    assert np.array_equal(grad[0], [0.0, 0.0])
    assert np.allclose(grad[1], [-0.25, 0.25])


def test_weighted_cross_entropy_normalization():
    batch = ProbBatch.from_probs(np.array([[0.5, 0.5], [0.5, 0.5]]), [0, 1])
    value, _ = cross_entropy(batch, weights=[3.0, 1.0])
    # both samples contribute -log(1/2); weights cancel in the normalized mean
    assert value == pytest.approx(math.log(2))
    batch2 = ProbBatch.from_probs(np.array([[0.5, 0.5], [0.25, 0.75]]), [0, 1])
    value2, _ = cross_entropy(batch2, weights=[3.0, 1.0])
    expected = (3 * -math.log(0.5) + 1 * -math.log(0.75)) / 4
    assert value2 == pytest.approx(expected, abs=1e-15)


def test_class_weight_validation():
    with pytest.raises(ValidationError):
        validate_class_weights([1.0, 0.0], 2)
    with pytest.raises(ValidationError):
        validate_class_weights([1.0], 2)


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([0, 0, 0, 1], 3)
    assert w[2] == 1.0
    # two present classes, weights sum to 2, ratio 1:3
    assert w[0] + w[1] == pytest.approx(2.0)
    assert w[1] / w[0] == pytest.approx(3.0)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(21)
    for _ in range(10):
        b, k = int(rng.integers(2, 8)), int(rng.integers(2, 5))
        logits = rng.normal(size=(b, k))
        labels = rng.integers(0, k, b)
        _, grad = cross_entropy(ProbBatch.from_logits(logits, labels))
        fd = oracles.fd_gradient(
            lambda lg: cross_entropy(ProbBatch.from_logits(lg, labels))[0], logits
        )
        assert grad_close(grad, fd)


def test_weighted_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(22)
    for _ in range(10):
        b, k = int(rng.integers(2, 8)), int(rng.integers(2, 5))
        logits = rng.normal(size=(b, k))
        labels = rng.integers(0, k, b)
        weights = rng.uniform(0.5, 3.0, k)
        _, grad = cross_entropy(ProbBatch.from_logits(logits, labels), weights)
        fd = oracles.fd_gradient(
            lambda lg: cross_entropy(ProbBatch.from_logits(lg, labels), weights)[0], logits
        )
        assert grad_close(grad, fd)


def test_soft_kappa_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    for _ in range(10):
        b, k = int(rng.integers(3, 9)), int(rng.integers(2, 5))
        logits = rng.normal(size=(b, k))
        labels = mixed_labels(rng, b, k)
        _, grad = soft_kappa_loss(ProbBatch.from_logits(logits, labels))
        fd = oracles.fd_gradient(
            lambda lg: soft_kappa_loss(ProbBatch.from_logits(lg, labels))[0], logits
        )
        assert grad_close(grad, fd)


def test_soft_kappa_degenerate_batches():
    with pytest.raises(ValidationError, match="at least 2"):
        soft_kappa_loss(ProbBatch.from_logits(np.zeros((1, 3)), [0]))
    with pytest.raises(ValidationError, match="single target class"):
        soft_kappa_loss(ProbBatch.from_logits(np.zeros((4, 3)), [1, 1, 1, 1]))


def test_soft_kappa_low_for_perfect_high_for_reversed():
    # confident correct predictions drive the surrogate toward 0,
    # order-reversed predictions push it above 1
    labels = [0, 0, 1, 1, 2, 2]
    good = ProbBatch.from_logits(10.0 * one_hot(labels, 3), labels)
    bad = ProbBatch.from_logits(10.0 * one_hot([2, 2, 1, 1, 0, 0], 3), labels)
    assert soft_kappa_loss(good)[0] < 0.01
    assert soft_kappa_loss(bad)[0] > 1.5


def test_dice_loss_perfect_prediction():
    labels = [0, 1, 1, 0]
    batch = ProbBatch.from_probs(one_hot(labels, 2), labels)
    value, _ = dice_loss(batch, include_background=True)
    assert value == pytest.approx(-1.0)


def test_dice_loss_background_exclusion():
    labels = [0, 0, 1]
    probs = np.array([[0.8, 0.2], [0.7, 0.3], [0.4, 0.6]])
    batch = ProbBatch.from_probs(probs, labels)
    value, _ = dice_loss(batch, include_background=False)
    # only class 1 scored: numer = 0.6, denom = (0.2+0.3+0.6) + 1
    assert value == pytest.approx(-2 * 0.6 / 2.1)


def test_dice_loss_requires_explicit_background_choice():
    batch = ProbBatch.from_logits(np.zeros((2, 2)), [0, 1])
    with pytest.raises(TypeError):
        dice_loss(batch, True)


def test_dice_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(24)
    for include in (True, False):
        for _ in range(8):
            b, k = int(rng.integers(3, 10)), int(rng.integers(2, 5))
            logits = rng.normal(size=(b, k))
            labels = mixed_labels(rng, b, k)
            _, grad = dice_loss(ProbBatch.from_logits(logits, labels), include_background=include)
            fd = oracles.fd_gradient(
                lambda lg: dice_loss(
                    ProbBatch.from_logits(lg, labels), include_background=include
                )[0],
                logits,
            )
            assert grad_close(grad, fd)


def test_composite_schedule_alpha():
    sched = CompositeSchedule(alpha_start=1.0, alpha_end=0.0, total_epochs=5)
    assert sched.alpha(0) == 1.0
    assert sched.alpha(2) == 0.5
    assert sched.alpha(4) == 0.0
    with pytest.raises(ValidationError):
        sched.alpha(5)
    assert CompositeSchedule(total_epochs=1).alpha(0) == 1.0


def test_composite_zero_coefficients_reproduce_constituents_exactly():
    rng = np.random.default_rng(25)
    logits = rng.normal(size=(6, 3))
    labels = mixed_labels(rng, 6, 3)
    batch = ProbBatch.from_logits(logits, labels)

    ce_v, ce_g = cross_entropy(batch)
    v, g = composite_loss(batch, CompositeSchedule(lam=0.0), CompositeMode.WCE_PLUS_LAMBDA_KAPPA, 0)
    assert v == ce_v and np.array_equal(g, ce_g)

    sched = CompositeSchedule(alpha_start=1.0, alpha_end=0.0, total_epochs=3)
    v, g = composite_loss(batch, sched, CompositeMode.ALPHA_BLEND, 0)
    assert v == ce_v and np.array_equal(g, ce_g)

    kv, kg = soft_kappa_loss(batch)
    v, g = composite_loss(batch, sched, CompositeMode.ALPHA_BLEND, 2)
    assert v == kv and np.array_equal(g, kg)


def test_composite_blend_matches_weighted_sum():
    rng = np.random.default_rng(26)
    logits = rng.normal(size=(6, 3))
    labels = mixed_labels(rng, 6, 3)
    batch = ProbBatch.from_logits(logits, labels)
    weights = np.array([1.0, 2.0, 0.5])
    sched = CompositeSchedule(lam=0.7, alpha_start=1.0, alpha_end=0.0, total_epochs=5)

    ce_v, ce_g = cross_entropy(batch, weights)
    kv, kg = soft_kappa_loss(batch)

    v, g = composite_loss(batch, sched, CompositeMode.WCE_PLUS_LAMBDA_KAPPA, 0, weights)
    assert v == ce_v + 0.7 * kv
    assert np.array_equal(g, ce_g + 0.7 * kg)

    alpha = sched.alpha(1)
    v, g = composite_loss(batch, sched, CompositeMode.ALPHA_BLEND, 1, weights)
    assert v == alpha * ce_v + (1 - alpha) * kv
    assert np.array_equal(g, alpha * ce_g + (1 - alpha) * kg)


def test_composite_gradients_match_finite_differences():
    rng = np.random.default_rng(27)
    sched = CompositeSchedule(lam=0.5, alpha_start=0.8, alpha_end=0.2, total_epochs=4)
    for mode in CompositeMode:
        for _ in range(6):
            b, k = int(rng.integers(3, 8)), int(rng.integers(2, 5))
            logits = rng.normal(size=(b, k))
            labels = mixed_labels(rng, b, k)
            _, grad = composite_loss(ProbBatch.from_logits(logits, labels), sched, mode, 1)
            fd = oracles.fd_gradient(
                lambda lg: composite_loss(ProbBatch.from_logits(lg, labels), sched, mode, 1)[0],
                logits,
            )
            assert grad_close(grad, fd)

"""Weighted cross-entropy: frozen fixtures, invariants, gradient routes."""

import numpy as np
import pytest

import fundusseg.tensor as T
from fundusseg.loss import LossWeights, total_loss, weighted_ce
from fundusseg.reference import weighted_ce_naive

F64 = np.float64


def nd(a):
    return T.Node(np.asarray(a, dtype=F64))


def test_uniform_logits_single_pixel_is_log_k():
    # Five equal logits -> softmax 0.2 everywhere -> CE = -ln(0.2).
    logits = nd(np.zeros((5, 1, 1)))
    labels = np.array([[3]], dtype=np.int64)
    loss = weighted_ce(logits, labels, [1, 1, 1, 1, 1])
    assert abs(loss.data - (-np.log(0.2))) < 1e-12


def test_all_zero_weights_give_exact_zero():
    r = np.random.default_rng(0)
    logits = nd(r.standard_normal((5, 4, 4)))
    labels = r.integers(0, 5, size=(4, 4))
    loss = weighted_ce(logits, labels, [0, 0, 0, 0, 0])
    assert loss.data == 0.0


def test_unit_weights_match_plain_ce():
    r = np.random.default_rng(1)
    logits = r.standard_normal((5, 6, 7))
    labels = r.integers(0, 5, size=(6, 7))
    loss = weighted_ce(nd(logits), labels, [1] * 5)
    # plain mean CE computed independently
    z = logits.reshape(5, -1)
    y = labels.reshape(-1)
    p = np.exp(z - z.max(0)) / np.exp(z - z.max(0)).sum(0)
    plain = -np.log(p[y, np.arange(y.size)]).mean()
    assert abs(loss.data - plain) < 1e-7


def test_matches_naive_reference():
    r = np.random.default_rng(2)
    for _ in range(5):
        logits = r.standard_normal((5, 3, 4))
        labels = r.integers(0, 5, size=(3, 4))
        w = r.uniform(0.0, 2.0, size=5)
        ours = weighted_ce(nd(logits), labels, w).data
        ref = weighted_ce_naive(logits, labels, w)
        assert abs(ours - ref) < 1e-12


def test_monotone_in_true_class_logit():
    r = np.random.default_rng(3)
    logits = r.standard_normal((5, 2, 2))
    labels = r.integers(0, 5, size=(2, 2))
    w = [0.5, 1.0, 2.0, 1.0, 0.25]
    base = weighted_ce(nd(logits), labels, w).data
    bumped = logits.copy()
    bumped[labels[1, 1], 1, 1] += 0.5  # raising the true-class logit can only help
    assert weighted_ce(nd(bumped), labels, w).data < base


def test_gradient_against_finite_differences():
    r = np.random.default_rng(4)
    logits = nd(r.standard_normal((5, 3, 3)))
    labels = r.integers(0, 5, size=(3, 3))
    w = [0.001, 0.1, 0.1, 1.0, 0.1]
    worst, _ = T.grad_check(lambda: weighted_ce(logits, labels, w), [logits])
    # tiny class weights shrink some gradients to ~1e-6 where finite-difference
    # cancellation noise caps the achievable relative accuracy
    assert worst < 1e-5


def test_label_out_of_range_names_pixel():
    logits = nd(np.zeros((5, 2, 2)))
    labels = np.zeros((2, 2), dtype=np.int64)
    labels[1, 0] = 7
    with pytest.raises(ValueError, match=r"y=1, x=0"):
        weighted_ce(logits, labels, [1] * 5)


def test_label_shape_and_dtype_errors():
    logits = nd(np.zeros((5, 2, 2)))
    with pytest.raises(ValueError, match="shape"):
        weighted_ce(logits, np.zeros((3, 2), dtype=np.int64), [1] * 5)
    with pytest.raises(TypeError, match="integer"):
        weighted_ce(logits, np.zeros((2, 2), dtype=np.float32), [1] * 5)


def _two_branch_losses(lam, r):
    lesion_logits = nd(r.standard_normal((5, 4, 4)))
    vessel_logits = nd(r.standard_normal((2, 4, 4)))
    lesion_labels = r.integers(0, 5, size=(4, 4))
    vessel_labels = r.integers(0, 2, size=(4, 4))
    w = LossWeights(lam=lam)
    total, lesion, vessel = total_loss(
        lesion_logits, lesion_labels, vessel_logits, vessel_labels, w)
    return total, lesion, vessel, lesion_logits, vessel_logits


def test_lambda_zero_total_is_lesion_loss_bitwise():
    r = np.random.default_rng(5)
    total, lesion, vessel, _, vlog = _two_branch_losses(0.0, r)
    assert total is lesion
    total.backward()
    assert vlog.grad is None  # no gradient flows into the vessel branch


def test_vessel_gradient_scales_linearly_with_lambda():
    grads = {}
    for lam in (0.1, 0.2):
        r = np.random.default_rng(6)  # identical inputs for both lambdas
        total, _, _, llog, vlog = _two_branch_losses(lam, r)
        total.backward()
        grads[lam] = (llog.grad.copy(), vlog.grad.copy())
    lg1, vg1 = grads[0.1]
    lg2, vg2 = grads[0.2]
    assert np.array_equal(lg1, lg2)  # lesion gradient independent of lambda
    ratio = vg2 / vg1
    assert np.all(np.abs(ratio - 2.0) < 1e-5)


def test_total_value_is_sum_of_parts():
    r = np.random.default_rng(7)
    total, lesion, vessel, _, _ = _two_branch_losses(0.1, r)
    assert abs(total.data - (lesion.data + 0.1 * vessel.data)) < 1e-12


def test_negative_weight_rejected():
    with pytest.raises(ValueError, match="non-negative"):
        LossWeights(lesion=(0.1, -1, 0.1, 1, 0.1)).validate()

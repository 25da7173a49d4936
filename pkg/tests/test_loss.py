"""
Unit tests for the set-prediction loss.
"""
import numpy as np
import pytest

from targeted_detector.config import LossWeights
from targeted_detector.errors import AssignmentError
from targeted_detector.loss import LossBreakdown, set_loss
from targeted_detector.matching import GroundTruthSet, MatchAssignment, match
from targeted_detector.model import DetectionSet
from targeted_detector.tensor import GradientTape, constant, parameter


def random_prediction(rng, n_slots=6, n_classes=3, n_targets=3) -> DetectionSet:
    return DetectionSet(
        parameter(rng.uniform(0.05, 0.95, size=(n_slots, 4))),
        parameter(rng.normal(size=(n_slots, n_classes + 1))),
        parameter(rng.normal(size=(n_slots, n_targets + 1))),
    )


def random_ground_truth(rng, n_gt, n_classes=3, n_targets=3) -> GroundTruthSet:
    return GroundTruthSet(
        rng.uniform(0.1, 0.9, size=(n_gt, 4)),
        rng.integers(0, n_classes, size=n_gt),
        rng.integers(0, n_targets, size=n_gt),
    )


class TestSetLoss:
    """Test cases for set_loss."""

    def test_gt_order_invariance(self):
        """Shuffling ground-truth order changes the loss by less than 1e-9."""
        rng = np.random.default_rng(7)
        weights = LossWeights()
        for _ in range(100):
            pred = random_prediction(rng)
            gt = random_ground_truth(rng, int(rng.integers(0, 7)))
            loss, _ = set_loss(pred, gt, match(pred, gt, weights), weights)
            shuffled = gt.permuted(rng.permutation(len(gt)))
            loss_shuffled, _ = set_loss(pred, shuffled, match(pred, shuffled, weights), weights)
            assert abs(loss.item() - loss_shuffled.item()) < 1e-9

    def test_empty_ground_truth(self):
        """With no ground truth the loss is finite, box term 0 and every slot targets no-object."""
        rng = np.random.default_rng(1)
        pred = random_prediction(rng)
        weights = LossWeights()
        gt = GroundTruthSet.empty()
        assignment = match(pred, gt, weights)
        loss, parts = set_loss(pred, gt, assignment, weights)
        assert assignment.pairs == ()
        assert np.isfinite(loss.item())
        assert parts.box_term == 0.0

    def test_weighted_sum(self):
        """total = kC L_C + kB L_B + kI L_I."""
        rng = np.random.default_rng(2)
        pred = random_prediction(rng)
        gt = random_ground_truth(rng, 3)
        weights = LossWeights(k_class=2.0, k_box=3.0, k_index=0.5)
        _, parts = set_loss(pred, gt, match(pred, gt, weights), weights)
        expected = 2.0 * parts.class_term + 3.0 * parts.box_term + 0.5 * parts.index_term
        assert parts.total == pytest.approx(expected)

    def test_perfect_prediction_box_term(self):
        """Exact boxes give a zero box term."""
        boxes = np.array([[0.2, 0.2, 0.1, 0.1], [0.6, 0.6, 0.2, 0.2]])
        pred = DetectionSet(
            parameter(boxes.copy()), parameter(np.zeros((2, 3))), parameter(np.zeros((2, 2)))
        )
        gt = GroundTruthSet(boxes, np.array([0, 1]), np.array([0, 0]))
        assignment = MatchAssignment(((0, 0), (1, 1)), 0.0)
        _, parts = set_loss(pred, gt, assignment, LossWeights())
        assert parts.box_term == 0.0

    def test_box_term_averages_over_matches(self):
        """The box term is the summed L1 divided by the number of matches."""
        pred = DetectionSet(
            parameter(np.array([[0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]])),
            parameter(np.zeros((2, 2))),
            parameter(np.zeros((2, 2))),
        )
        gt = GroundTruthSet(np.array([[0.4, 0.5, 0.2, 0.2], [0.5, 0.2, 0.2, 0.2]]), [0, 0], [0, 0])
        _, parts = set_loss(pred, gt, MatchAssignment(((0, 0), (1, 1)), 0.0), LossWeights())
        assert parts.box_term == pytest.approx((0.1 + 0.3) / 2)

    def test_invalid_assignment(self):
        """An assignment that misses a ground truth is rejected."""
        rng = np.random.default_rng(3)
        pred = random_prediction(rng)
        gt = random_ground_truth(rng, 2)
        with pytest.raises(AssignmentError):
            set_loss(pred, gt, MatchAssignment(((0, 0),), 0.0), LossWeights())

    def test_gradients_reach_all_heads(self):
        """Backward populates gradients of boxes and both logit tensors."""
        rng = np.random.default_rng(4)
        pred = random_prediction(rng)
        gt = random_ground_truth(rng, 2)
        weights = LossWeights()
        assignment = match(pred, gt, weights)
        with GradientTape() as tape:
            loss, _ = set_loss(pred, gt, assignment, weights)
        tape.backward(loss)
        for tensor in (pred.boxes, pred.class_logits, pred.target_index_logits):
            assert tensor.grad is not None and np.any(tensor.grad != 0)

    def test_terms_nonnegative(self):
        """All three terms are >= 0."""
        rng = np.random.default_rng(5)
        weights = LossWeights()
        for _ in range(50):
            pred = random_prediction(rng)
            gt = random_ground_truth(rng, int(rng.integers(0, 7)))
            _, parts = set_loss(pred, gt, match(pred, gt, weights), weights)
            assert min(parts.class_term, parts.box_term, parts.index_term) >= 0.0

    def test_zero_index_weight_ignores_index_head(self):
        """With k_I = 0 the target-index logits have no effect on matching or loss."""
        rng = np.random.default_rng(6)
        weights = LossWeights(k_index=0.0)
        for _ in range(20):
            pred = random_prediction(rng)
            other = DetectionSet(pred.boxes, pred.class_logits, parameter(rng.normal(size=(6, 4)) * 5.0))
            gt = random_ground_truth(rng, int(rng.integers(1, 5)))
            loss, parts = set_loss(pred, gt, match(pred, gt, weights), weights)
            loss_other, _ = set_loss(other, gt, match(other, gt, weights), weights)
            assert abs(loss.item() - loss_other.item()) < 1e-12
            assert loss.item() == pytest.approx(parts.class_term + 5.0 * parts.box_term, abs=1e-12)

    def test_breakdown_mean(self):
        """LossBreakdown.mean averages each field."""
        mean = LossBreakdown.mean([LossBreakdown(1, 2, 3, 4), LossBreakdown(3, 4, 5, 6)])
        assert mean == LossBreakdown(2, 3, 4, 5)


def test_constant_predictions_are_accepted():
    """Predictions need not require gradients."""
    pred = DetectionSet(constant(np.full((2, 4), 0.5)), constant(np.zeros((2, 3))), constant(np.zeros((2, 2))))
    loss, _ = set_loss(pred, GroundTruthSet.empty(), MatchAssignment((), 0.0), LossWeights())
    assert np.isfinite(loss.item())

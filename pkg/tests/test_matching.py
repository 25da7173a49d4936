"""
Unit tests for pairwise costs and Hungarian matching.
"""
import itertools
import math

import numpy as np
import pytest

from targeted_detector.config import LossWeights
from targeted_detector.errors import AssignmentError, DimensionError, NonFiniteError, VocabularyError
from targeted_detector.matching import GroundTruthSet, MatchAssignment, hungarian, match, pairwise_cost
from targeted_detector.model import DetectionSet
from targeted_detector.tensor import constant


def brute_force(cost: np.ndarray) -> float:
    n_slots, n_gt = cost.shape
    best = math.inf
    for slots in itertools.permutations(range(n_slots), n_gt):
        best = min(best, math.fsum(cost[s, g] for g, s in enumerate(slots)))
    return best


def detection_set(boxes, class_logits, index_logits) -> DetectionSet:
    return DetectionSet(constant(boxes), constant(class_logits), constant(index_logits))


class TestHungarian:
    """Test cases for the rectangular assignment solver."""

    def test_matches_brute_force(self):
        """1000 random rectangular matrices: optimal cost equals enumeration."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n_slots = int(rng.integers(1, 8))
            n_gt = int(rng.integers(0, n_slots + 1))
            cost = rng.uniform(0.0, 10.0, size=(n_slots, n_gt))
            if rng.random() < 0.3:
                cost = np.round(cost)
            assignment = hungarian(cost)
            assignment.validate(n_slots, n_gt)
            expected = brute_force(cost) if n_gt else 0.0
            assert assignment.total_cost == pytest.approx(expected, abs=1e-9)

    def test_square_identity(self):
        """The diagonal is chosen when it is cheapest."""
        cost = np.array([[0.0, 5.0, 5.0], [5.0, 0.0, 5.0], [5.0, 5.0, 0.0]])
        assert hungarian(cost).pairs == ((0, 0), (1, 1), (2, 2))

    def test_ties_prefer_lowest_slot(self):
        """With all costs equal the lowest slots win in order."""
        assignment = hungarian(np.ones((4, 2)))
        assert sorted(assignment.slots) == [0, 1]

    def test_pairs_ordered_by_gt(self):
        """Pairs are listed by ground-truth index."""
        cost = np.array([[9.0, 0.0], [0.0, 9.0], [5.0, 5.0]])
        assignment = hungarian(cost)
        assert assignment.pairs == ((1, 0), (0, 1))
        assert assignment.total_cost == 0.0

    def test_empty(self):
        """No ground truths gives an empty assignment."""
        assignment = hungarian(np.zeros((5, 0)))
        assert assignment.pairs == ()
        assert assignment.total_cost == 0.0

    def test_more_gts_than_slots(self):
        """R > N is an assignment error."""
        with pytest.raises(AssignmentError):
            hungarian(np.zeros((2, 3)))

    def test_non_finite(self):
        """NaN or infinite costs are rejected."""
        with pytest.raises(NonFiniteError):
            hungarian(np.array([[np.nan, 1.0], [1.0, 1.0]]))

    def test_not_a_matrix(self):
        """The cost must be 2-D."""
        with pytest.raises(DimensionError):
            hungarian(np.zeros(3))


class TestAssignment:
    """Validation of assignments."""

    def test_duplicate_slot(self):
        """A slot used twice is invalid."""
        with pytest.raises(AssignmentError):
            MatchAssignment(((0, 0), (0, 1)), 0.0).validate(3, 2)

    def test_missing_gt(self):
        """Every ground truth must appear exactly once."""
        with pytest.raises(AssignmentError):
            MatchAssignment(((0, 0),), 0.0).validate(3, 2)


class TestPairwiseCost:
    """The weighted matching cost."""

    def test_cost_components(self):
        """Cost = kC (1 - p_class) + kB L1 + kI (1 - p_index)."""
        pred = detection_set(
            [[0.5, 0.5, 0.2, 0.2]],
            [[0.0, 0.0, 0.0]],
            [[0.0, 0.0]],
        )
        gt = GroundTruthSet(np.array([[0.4, 0.5, 0.2, 0.4]]), np.array([1]), np.array([0]))
        weights = LossWeights(k_class=2.0, k_box=5.0, k_index=3.0)
        cost = pairwise_cost(pred, gt, weights)
        expected = 2.0 * (1 - 1 / 3) + 5.0 * (0.1 + 0.2) + 3.0 * (1 - 1 / 2)
        assert cost.shape == (1, 1)
        assert cost[0, 0] == pytest.approx(expected)

    def test_class_outside_head(self):
        """Ground-truth classes must fit the class head."""
        pred = detection_set([[0.5, 0.5, 0.2, 0.2]], [[0.0, 0.0]], [[0.0, 0.0]])
        gt = GroundTruthSet(np.array([[0.5, 0.5, 0.2, 0.2]]), np.array([1]), np.array([0]))
        with pytest.raises(VocabularyError):
            pairwise_cost(pred, gt, LossWeights())

    def test_match_prefers_right_slot(self):
        """Each ground truth is matched to the slot that predicts it."""
        pred = detection_set(
            [[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1], [0.5, 0.5, 0.5, 0.5]],
            [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]],
            [[5.0, 0.0], [5.0, 0.0], [0.0, 5.0]],
        )
        gt = GroundTruthSet(
            np.array([[0.8, 0.8, 0.1, 0.1], [0.2, 0.2, 0.1, 0.1]]), np.array([1, 0]), np.array([0, 0])
        )
        assert match(pred, gt, LossWeights()).pairs == ((1, 0), (0, 1))


class TestGroundTruthSet:
    """Ground-truth validation."""

    def test_box_outside_unit_square(self):
        """Coordinates must lie in [0, 1]."""
        with pytest.raises(DimensionError):
            GroundTruthSet(np.array([[0.5, 0.5, 1.2, 0.1]]), np.array([0]), np.array([0]))

    def test_length_mismatch(self):
        """Boxes, classes and indices must have equal length."""
        with pytest.raises(DimensionError):
            GroundTruthSet(np.zeros((2, 4)) + 0.5, np.array([0]), np.array([0, 0]))

    def test_permuted(self):
        """permuted reorders every field together."""
        gt = GroundTruthSet(
            np.array([[0.1, 0.1, 0.1, 0.1], [0.9, 0.9, 0.1, 0.1]]), np.array([0, 1]), np.array([1, 0])
        )
        flipped = gt.permuted([1, 0])
        np.testing.assert_array_equal(flipped.class_ids, [1, 0])
        np.testing.assert_array_equal(flipped.target_indices, [0, 1])

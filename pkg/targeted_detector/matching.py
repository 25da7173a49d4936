"""
Bipartite matching between prediction slots and ground-truth instances.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from targeted_detector.config import LossWeights
from targeted_detector.errors import AssignmentError, DimensionError, NonFiniteError, VocabularyError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruthSet:
    """
    R annotated instances of one sample.

    ``boxes`` is R x 4 normalized (cx, cy, w, h); ``target_indices`` says which
    target phrase each instance belongs to.
    """

    boxes: np.ndarray
    class_ids: np.ndarray
    target_indices: np.ndarray

    def __post_init__(self) -> None:
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        target_indices = np.asarray(self.target_indices, dtype=np.int64).reshape(-1)
        if not len(boxes) == len(class_ids) == len(target_indices):
            raise DimensionError("boxes, class_ids and target_indices must have equal length")
        if len(boxes):
            if boxes.min() < 0.0 or boxes.max() > 1.0:
                raise DimensionError("ground-truth coordinates must lie in [0, 1]")
            if (boxes[:, 2:] <= 0).any():
                raise DimensionError("ground-truth boxes must have positive width and height")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "class_ids", class_ids)
        object.__setattr__(self, "target_indices", target_indices)

    @classmethod
    def empty(cls) -> "GroundTruthSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.boxes)

    def permuted(self, order: Sequence[int]) -> "GroundTruthSet":
        order = np.asarray(order, dtype=np.int64)
        return GroundTruthSet(self.boxes[order], self.class_ids[order], self.target_indices[order])


@dataclass(frozen=True)
class MatchAssignment:
    """One (prediction_slot, gt_index) pair per ground truth, ordered by gt index."""

    pairs: Tuple[Tuple[int, int], ...]
    total_cost: float

    @property
    def slots(self) -> List[int]:
        return [slot for slot, _ in self.pairs]

    @property
    def gt_indices(self) -> List[int]:
        return [gt for _, gt in self.pairs]

    def validate(self, n_slots: int, n_gt: int) -> None:
        slots = self.slots
        if len(set(slots)) != len(slots):
            raise AssignmentError("a prediction slot is matched twice")
        if any(not 0 <= s < n_slots for s in slots):
            raise AssignmentError(f"prediction slot outside [0, {n_slots})")
        if sorted(self.gt_indices) != list(range(n_gt)):
            raise AssignmentError(f"assignment does not cover ground truths 0..{n_gt - 1} exactly once")


def box_l1_matrix(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Pairwise sum of absolute coordinate differences, N x R."""
    return np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)


def pairwise_cost(pred, gt: GroundTruthSet, weights: LossWeights) -> np.ndarray:
    """
    Matching cost [N x R]:
    ``k_class * (1 - p_class) + k_box * L1 + k_index * (1 - p_index)``.
    """
    class_probs = pred.class_probs()
    index_probs = pred.target_index_probs()
    if len(gt) and gt.class_ids.max(initial=0) >= class_probs.shape[1] - 1:
        raise VocabularyError(f"ground-truth class outside the {class_probs.shape[1] - 1} classes")
    if len(gt) and gt.target_indices.max(initial=0) >= index_probs.shape[1] - 1:
        raise VocabularyError(f"target index outside the {index_probs.shape[1] - 1} target slots")
    if (gt.class_ids < 0).any() or (gt.target_indices < 0).any():
        raise VocabularyError("negative class or target index")

    cost_class = 1.0 - class_probs[:, gt.class_ids]
    cost_index = 1.0 - index_probs[:, gt.target_indices]
    cost_box = box_l1_matrix(pred.boxes.data, gt.boxes)
    return weights.k_class * cost_class + weights.k_box * cost_box + weights.k_index * cost_index


def hungarian(cost: np.ndarray) -> MatchAssignment:
    """
    Minimum-cost injective assignment of the R columns of an N x R matrix
    (N >= R) to distinct rows.

    Shortest-augmenting-path Kuhn-Munkres with row/column potentials, run on
    the transposed R x N problem; O(R^2 N). Ties go to the lowest slot index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n_slots, n_gt = cost.shape
    if n_gt == 0:
        return MatchAssignment(pairs=(), total_cost=0.0)
    if n_slots < n_gt:
        raise AssignmentError(f"{n_gt} ground truths cannot fit into {n_slots} slots")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("cost matrix contains NaN or infinite entries")

    a = cost.T  # rows: ground truths, columns: slots
    n, m = a.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = 1-based row assigned to column j
    way = np.zeros(m + 1, dtype=np.int64)

    for row in range(1, n + 1):
        owner[0] = row
        col = 0
        min_reduced = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[col] = True
            current = owner[col]
            reduced = a[current - 1] - u[current] - v[1:]
            free = ~used[1:]
            better = free & (reduced < min_reduced[1:])
            min_reduced[1:][better] = reduced[better]
            way[1:][better] = col
            candidates = np.where(free, min_reduced[1:], np.inf)
            next_col = int(np.argmin(candidates)) + 1
            delta = candidates[next_col - 1]

            u[owner[used]] += delta
            v[used] -= delta
            min_reduced[~used] -= delta
            col = next_col
            if owner[col] == 0:
                break
        while col:
            prev = way[col]
            owner[col] = owner[prev]
            col = prev

    slot_of = {}
    for j in range(1, m + 1):
        if owner[j]:
            slot_of[int(owner[j]) - 1] = j - 1
    pairs = tuple((slot_of[g], g) for g in range(n))
    total = math.fsum(cost[slot, g] for slot, g in pairs)
    assignment = MatchAssignment(pairs=pairs, total_cost=total)
    assignment.validate(n_slots, n_gt)
    return assignment


def match(pred, gt: GroundTruthSet, weights: LossWeights) -> MatchAssignment:
    """Hungarian matching of one sample's predictions to its ground truths."""
    if len(gt) == 0:
        return MatchAssignment(pairs=(), total_cost=0.0)
    assignment = hungarian(pairwise_cost(pred, gt, weights))
    logger.debug("matched %d ground truths, cost %.6f", len(gt), assignment.total_cost)
    return assignment

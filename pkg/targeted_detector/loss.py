"""
Set-prediction loss: L = k_C * L_C + k_B * L_B + k_I * L_I.
"""
import logging
from dataclasses import dataclass

import numpy as np

from targeted_detector.config import LossWeights
from targeted_detector.errors import VocabularyError
from targeted_detector.matching import GroundTruthSet, MatchAssignment
from targeted_detector.model import DetectionSet
from targeted_detector.tensor import (
    Tensor,
    add,
    constant,
    cross_entropy,
    embedding_lookup,
    l1,
    scale,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    class_term: float
    box_term: float
    index_term: float

    @classmethod
    def mean(cls, items) -> "LossBreakdown":
        items = list(items)
        count = len(items)
        return cls(
            total=sum(i.total for i in items) / count,
            class_term=sum(i.class_term for i in items) / count,
            box_term=sum(i.box_term for i in items) / count,
            index_term=sum(i.index_term for i in items) / count,
        )


def set_loss(
    pred: DetectionSet,
    gt: GroundTruthSet,
    assignment: MatchAssignment,
    weights: LossWeights,
):
    """
    Loss of one sample given its matching.

    L_C is cross-entropy over all N slots; matched slots target their
    ground-truth class with weight 1, the rest target no-object with weight
    ``no_object_weight``. L_B is the L1 box distance averaged over matched
    pairs (0 when there are none). L_I is cross-entropy over all N slots,
    unmatched slots targeting no-target.

    Returns:
        (scalar loss Tensor, LossBreakdown of the unweighted terms and total)
    """
    n_slots = len(pred)
    assignment.validate(n_slots, len(gt))
    no_object = pred.class_logits.shape[1] - 1
    no_target = pred.target_index_logits.shape[1] - 1
    if len(gt) and (gt.class_ids.max() >= no_object or gt.target_indices.max() >= no_target):
        raise VocabularyError("ground-truth class or target index outside the prediction heads")

    class_targets = np.full(n_slots, no_object, dtype=np.int64)
    class_weights = np.full(n_slots, weights.no_object_weight)
    index_targets = np.full(n_slots, no_target, dtype=np.int64)
    for slot, g in assignment.pairs:
        class_targets[slot] = gt.class_ids[g]
        class_weights[slot] = 1.0
        index_targets[slot] = gt.target_indices[g]

    loss_class = cross_entropy(pred.class_logits, class_targets, class_weights)
    loss_index = cross_entropy(pred.target_index_logits, index_targets)
    if assignment.pairs:
        matched = embedding_lookup(pred.boxes, assignment.slots)
        loss_box = scale(l1(matched, constant(gt.boxes[assignment.gt_indices])), 1.0 / len(gt))
    else:
        loss_box = constant(0.0)

    total: Tensor = add(
        add(scale(loss_class, weights.k_class), scale(loss_box, weights.k_box)),
        scale(loss_index, weights.k_index),
    )
    breakdown = LossBreakdown(
        total=total.item(),
        class_term=loss_class.item(),
        box_term=loss_box.item(),
        index_term=loss_index.item(),
    )
    return total, breakdown

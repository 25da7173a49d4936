"""
COCO-style evaluation: IoU, 101-point interpolated AP with greedy matching,
size buckets, target-index AP, the all / targeted-only / all-named protocols,
the deceptive-target sweep and a conditioning-purity check.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from targeted_detector.config import EvalConfig
from targeted_detector.dataprep import (
    AnnotationStore,
    TargetedSample,
    all_named_sample,
    all_token_sample,
    image_seed,
    inject_deceptive,
    sample_targets,
)
from targeted_detector.errors import ConfigError, DatasetError, SamplingError
from targeted_detector.model import DetectionSet, TargetedDetector
from targeted_detector.tokenizer import Tokenizer
from targeted_detector.trainer import TrainingExample, build_example
from targeted_detector.worker_pool import run_parallel

logger = logging.getLogger(__name__)

PROTOCOLS = ("all", "targeted_only", "all_named")
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AreaRange = Tuple[float, float]

_DECEPTIVE_STREAM = 1


@dataclass(frozen=True)
class Detection:
    image_id: int
    box: Tuple[float, float, float, float]  # normalized cx, cy, w, h
    class_id: int
    target_index: int
    score: float
    area: float = 0.0


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    box: Tuple[float, float, float, float]
    class_id: int
    target_index: int
    area: float = 0.0


@dataclass
class ImageResult:
    image_id: int
    detections: List[Detection]
    ground_truths: List[GroundTruthBox]


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes; 0 if either has no area."""
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _in_range(area: float, area_range: Optional[AreaRange]) -> bool:
    return area_range is None or area_range[0] <= area < area_range[1]


def _match_image(
    detections: List[Detection],
    ground_truths: List[GroundTruthBox],
    threshold: float,
    area_range: Optional[AreaRange],
) -> Tuple[List[Tuple[float, bool, bool]], int]:
    """
    Greedy matching for one image: detections in descending score take the
    best unmatched ground truth with IoU >= threshold, preferring ground
    truths inside the area range.

    Returns:
        ((score, matched, ignored) per detection, number of non-ignored ground truths)
    """
    gt_ignored = [not _in_range(g.area, area_range) for g in ground_truths]
    gt_order = sorted(range(len(ground_truths)), key=lambda i: gt_ignored[i])
    matched = set()
    records = []
    for det in sorted(detections, key=lambda d: -d.score):
        best = min(threshold, 1 - 1e-10)
        found = -1
        for g in gt_order:
            if g in matched:
                continue
            if found > -1 and not gt_ignored[found] and gt_ignored[g]:
                break
            overlap = iou(det.box, ground_truths[g].box)
            if overlap < best:
                continue
            best = overlap
            found = g
        if found > -1:
            matched.add(found)
            records.append((det.score, True, gt_ignored[found]))
        else:
            records.append((det.score, False, not _in_range(det.area, area_range)))
    return records, sum(1 for ignored in gt_ignored if not ignored)


def _group_by_image(items: Iterable) -> Dict[int, list]:
    groups: Dict[int, list] = {}
    for item in items:
        groups.setdefault(item.image_id, []).append(item)
    return groups


def average_precision(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float,
    area_range: Optional[AreaRange] = None,
) -> Optional[float]:
    """
    AP of one key's detections against its ground truths.

    Returns None when no ground truth falls in ``area_range``.
    """
    det_groups = _group_by_image(detections)
    gt_groups = _group_by_image(ground_truths)
    scores: List[float] = []
    hits: List[bool] = []
    n_positive = 0
    for image_id in sorted(set(det_groups) | set(gt_groups)):
        records, positives = _match_image(
            det_groups.get(image_id, []), gt_groups.get(image_id, []), iou_threshold, area_range
        )
        n_positive += positives
        for score, is_match, ignored in records:
            if not ignored:
                scores.append(score)
                hits.append(is_match)
    if n_positive == 0:
        return None
    if not scores:
        return 0.0

    order = np.argsort(-np.asarray(scores), kind="mergesort")
    hit = np.asarray(hits, dtype=bool)[order]
    tp = np.cumsum(hit)
    fp = np.cumsum(~hit)
    recall = tp / n_positive
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    interpolated = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interpolated.mean())


def mean_average_precision(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    thresholds: Sequence[float],
    key: str = "class_id",
    area_range: Optional[AreaRange] = None,
) -> Optional[float]:
    """AP averaged over every (key value, threshold) pair that has ground truth."""
    det_by_key: Dict[int, List[Detection]] = {}
    for det in detections:
        det_by_key.setdefault(getattr(det, key), []).append(det)
    gt_by_key: Dict[int, List[GroundTruthBox]] = {}
    for gt in ground_truths:
        gt_by_key.setdefault(getattr(gt, key), []).append(gt)

    values = []
    for value in sorted(gt_by_key):
        for threshold in thresholds:
            ap = average_precision(det_by_key.get(value, []), gt_by_key[value], threshold, area_range)
            if ap is not None:
                values.append(ap)
    return float(np.mean(values)) if values else None


@dataclass
class EvalReport:
    protocol: str
    AP: Optional[float]
    AP50: Optional[float]
    AP75: Optional[float]
    AP_S: Optional[float]
    AP_M: Optional[float]
    AP_L: Optional[float]
    target_index_AP: Optional[float]
    index_AP50: Optional[float] = None
    index_AP75: Optional[float] = None
    index_AP_S: Optional[float] = None
    index_AP_M: Optional[float] = None
    index_AP_L: Optional[float] = None
    per_category: Dict[str, Optional[float]] = field(default_factory=dict)
    images: int = 0
    detections: int = 0
    ground_truths: int = 0

    _METRICS = (
        "AP",
        "AP50",
        "AP75",
        "AP_S",
        "AP_M",
        "AP_L",
        "target_index_AP",
        "index_AP50",
        "index_AP75",
        "index_AP_S",
        "index_AP_M",
        "index_AP_L",
    )

    def metrics(self) -> Dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in self._METRICS}

    def to_text(self, prefix: str = "") -> str:
        """Flat ``key = value`` lines; missing values are written as ``absent``."""
        lines = [f"{prefix}protocol = {self.protocol}"]
        for name, value in self.metrics().items():
            lines.append(f"{prefix}{name} = {_format_metric(value)}")
        for name, value in self.per_category.items():
            lines.append(f"{prefix}category.{name}.AP = {_format_metric(value)}")
        lines.append(f"{prefix}images = {self.images}")
        lines.append(f"{prefix}detections = {self.detections}")
        lines.append(f"{prefix}ground_truths = {self.ground_truths}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        rows = [("protocol", self.protocol)]
        rows.extend((name, _format_percent(value)) for name, value in self.metrics().items())
        rows.extend((f"AP[{name}]", _format_percent(value)) for name, value in self.per_category.items())
        rows.append(("images", str(self.images)))
        rows.append(("detections", str(self.detections)))
        rows.append(("ground truths", str(self.ground_truths)))
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value:>8}" for name, value in rows)


def _format_metric(value: Optional[float]) -> str:
    return "absent" if value is None else repr(float(value))


def _format_percent(value: Optional[float]) -> str:
    return "absent" if value is None else f"{100.0 * value:.2f}"


def parse_report_text(text: str) -> Dict[str, str]:
    pairs = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def _ap_breakdown(
    detections: Sequence[Detection],
    ground_truths: Sequence[GroundTruthBox],
    cfg: EvalConfig,
    image_size: int,
    key: str,
) -> Tuple[Optional[float], ...]:
    """AP, AP50, AP75 and the three size buckets, keyed by ``key``."""
    thresholds = cfg.iou_thresholds
    small, large = cfg.area_bounds(image_size)
    return (
        mean_average_precision(detections, ground_truths, thresholds, key=key),
        mean_average_precision(detections, ground_truths, (0.5,), key=key),
        mean_average_precision(detections, ground_truths, (0.75,), key=key),
        mean_average_precision(detections, ground_truths, thresholds, key, area_range=(0.0, small)),
        mean_average_precision(detections, ground_truths, thresholds, key, area_range=(small, large)),
        mean_average_precision(detections, ground_truths, thresholds, key, area_range=(large, math.inf)),
    )


def summarize_results(
    results: Sequence[ImageResult],
    cfg: EvalConfig,
    image_size: int,
    class_names: Sequence[str] = (),
    protocol: str = "all",
) -> EvalReport:
    """
    Collapse per-image results into one report.

    Args:
        results: Detections and ground truths of every evaluated image
        cfg: IoU thresholds and size-bucket bounds
        image_size: Model input size, used to scale the size buckets
        class_names: Categories reported individually, in class-id order
        protocol: Name written into the report

    Returns:
        EvalReport: Class-keyed and target-index-keyed AP breakdowns
    """
    detections = [d for r in results for d in r.detections]
    ground_truths = [g for r in results for g in r.ground_truths]
    thresholds = cfg.iou_thresholds

    per_category: Dict[str, Optional[float]] = {}
    for class_id, name in enumerate(class_names):
        per_category[name] = mean_average_precision(
            [d for d in detections if d.class_id == class_id],
            [g for g in ground_truths if g.class_id == class_id],
            thresholds,
        )
    class_ap = _ap_breakdown(detections, ground_truths, cfg, image_size, "class_id")
    index_ap = _ap_breakdown(detections, ground_truths, cfg, image_size, "target_index")
    return EvalReport(
        protocol,
        *class_ap,
        *index_ap,
        per_category=per_category,
        images=len(results),
        detections=len(detections),
        ground_truths=len(ground_truths),
    )


def detections_from_prediction(
    pred: DetectionSet, image_id: int, cfg: EvalConfig, image_size: int
) -> List[Detection]:
    """
    Slot predictions -> scored detections. Slots whose most likely class is
    no-object are dropped; the score is the best real-class probability,
    optionally times the best real target-index probability.
    """
    class_probs = pred.class_probs()
    index_probs = pred.target_index_probs()
    no_object = class_probs.shape[1] - 1
    keep = class_probs.argmax(axis=1) != no_object
    class_ids = class_probs[:, :no_object].argmax(axis=1)
    scores = class_probs[:, :no_object].max(axis=1)
    target_indices = index_probs[:, :-1].argmax(axis=1)
    if cfg.score_source == "class_x_index":
        scores = scores * index_probs[:, :-1].max(axis=1)
    boxes = pred.boxes.data
    pixel_area = float(image_size) ** 2

    detections = [
        Detection(
            image_id=image_id,
            box=tuple(float(v) for v in boxes[slot]),
            class_id=int(class_ids[slot]),
            target_index=int(target_indices[slot]),
            score=float(scores[slot]),
            area=float(boxes[slot, 2] * boxes[slot, 3]) * pixel_area,
        )
        for slot in np.flatnonzero(keep)
    ]
    detections.sort(key=lambda d: -d.score)
    return detections[: cfg.max_detections]


def ground_truth_boxes(example: TrainingExample, image_size: int) -> List[GroundTruthBox]:
    targets = example.targets
    pixel_area = float(image_size) ** 2
    return [
        GroundTruthBox(
            image_id=example.image_id,
            box=tuple(float(v) for v in targets.boxes[i]),
            class_id=int(targets.class_ids[i]),
            target_index=int(targets.target_indices[i]),
            area=float(targets.boxes[i, 2] * targets.boxes[i, 3]) * pixel_area,
        )
        for i in range(len(targets))
    ]


def protocol_samples(
    store: AnnotationStore, image_ids: Sequence[int], protocol: str, seed: int
) -> List[TargetedSample]:
    """
    Evaluation inputs per protocol: ``all`` feeds ``[all]``, ``all_named``
    names every present category, ``targeted_only`` samples targets with the
    per-image seed of epoch 0.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {', '.join(PROTOCOLS)}")
    samples = []
    for image_id in image_ids:
        annotation = store.annotation(image_id)
        if protocol == "all":
            samples.append(all_token_sample(annotation))
        elif protocol == "all_named":
            samples.append(all_named_sample(annotation))
        else:
            item_seed = image_seed(seed, image_id, 0)
            samples.append(sample_targets(annotation, np.random.default_rng(item_seed), item_seed))
    return samples


def evaluate_samples(
    model: TargetedDetector,
    store: AnnotationStore,
    tokenizer: Tokenizer,
    samples: Sequence[TargetedSample],
    cfg: EvalConfig,
    protocol: str,
    workers: int = 1,
) -> EvalReport:
    if not samples:
        raise DatasetError("cannot evaluate an empty dataset")
    image_size = model.cfg.image_size

    def run_one(sample: TargetedSample) -> ImageResult:
        example = build_example(sample, store, tokenizer, model.cfg)
        pred = model.forward(example.image, example.tokens)
        return ImageResult(
            example.image_id,
            detections_from_prediction(pred, example.image_id, cfg, image_size),
            ground_truth_boxes(example, image_size),
        )

    results = run_parallel(run_one, samples, workers)
    report = summarize_results(results, cfg, image_size, store.category_names, protocol)
    logger.info("Evaluated %d images (%s): AP %s", len(results), protocol, _format_metric(report.AP))
    return report


def evaluate(
    model: TargetedDetector,
    store: AnnotationStore,
    tokenizer: Tokenizer,
    cfg: EvalConfig,
    protocol: str = "all",
    seed: int = 0,
    image_ids: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> EvalReport:
    """
    Evaluate ``model`` on the store's images under one protocol.

    Args:
        model: Trained detector, shared read-only by the workers
        store: Annotations and pixels of the evaluation images
        tokenizer: Vocabulary the model was trained with
        cfg: IoU thresholds, size buckets and detection scoring
        protocol: One of ``all``, ``targeted_only`` or ``all_named``
        seed: Seed for the targeted-only category draw
        image_ids: Subset of images to evaluate, all of them by default
        workers: Number of worker slots running forward passes

    Returns:
        EvalReport for the protocol

    Raises:
        DatasetError: no images to evaluate
    """
    image_ids = list(store.image_ids if image_ids is None else image_ids)
    if not image_ids:
        raise DatasetError("cannot evaluate an empty dataset")
    samples = protocol_samples(store, image_ids, protocol, seed)
    return evaluate_samples(model, store, tokenizer, samples, cfg, protocol, workers)


@dataclass(frozen=True)
class DeceptiveRow:
    rate: float
    AP: Optional[float]
    injected_images: int
    short_images: int


def deceptive_samples(
    store: AnnotationStore, samples: Sequence[TargetedSample], rate: float, seed: int
) -> Tuple[List[TargetedSample], int]:
    """
    Append deceptive phrases to each targeted sample. Images without enough
    absent categories keep their genuine phrases; their count is returned.
    """
    universe = store.category_names
    out = []
    short = 0
    for sample in samples:
        if not sample.target_phrases:
            out.append(sample)
            continue
        rng = np.random.default_rng([image_seed(seed, sample.image_id, 0), _DECEPTIVE_STREAM])
        present = store.annotation(sample.image_id).category_names
        try:
            out.append(inject_deceptive(sample, universe, rate, rng, present))
        except SamplingError as exc:
            logger.debug("%s", exc)
            short += 1
            out.append(sample)
    return out, short


def deceptive_eval(
    model: TargetedDetector,
    store: AnnotationStore,
    tokenizer: Tokenizer,
    cfg: EvalConfig,
    rates: Sequence[float],
    seed: int = 0,
    image_ids: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> List[DeceptiveRow]:
    """
    Targeted-only AP with deceptive phrases injected at each rate; rate 0 is the plain run.

    Args:
        rates: Deceptive rates to sweep, each nonnegative
        seed: Seed shared by the category draw and the deceptive picks

    Returns:
        One DeceptiveRow per rate, in the order given, with the number of
        images that had too few absent categories
    """
    image_ids = list(store.image_ids if image_ids is None else image_ids)
    base = protocol_samples(store, image_ids, "targeted_only", seed)
    rows = []
    for rate in rates:
        if rate < 0:
            raise SamplingError(f"deceptive rate must be nonnegative, got {rate}")
        if rate == 0:
            samples, short = list(base), 0
        else:
            samples, short = deceptive_samples(store, base, rate, seed)
        report = evaluate_samples(model, store, tokenizer, samples, cfg, "targeted_only", workers)
        injected = sum(1 for s in samples if s.deceptive_count)
        if short:
            logger.warning("rate %s: %d images had too few absent categories", rate, short)
        rows.append(DeceptiveRow(float(rate), report.AP, injected, short))
    return rows


def format_deceptive_text(rows: Sequence[DeceptiveRow]) -> str:
    lines = []
    for row in rows:
        lines.append(f"deceptive.{row.rate!r}.AP = {_format_metric(row.AP)}")
        lines.append(f"deceptive.{row.rate!r}.injected_images = {row.injected_images}")
        lines.append(f"deceptive.{row.rate!r}.short_images = {row.short_images}")
    return "\n".join(lines) + "\n"


def format_deceptive_table(rows: Sequence[DeceptiveRow]) -> str:
    lines = [f"{'rate':>6}  {'AP':>8}  {'injected':>8}  {'short':>6}"]
    for row in rows:
        lines.append(
            f"{row.rate:>6.2f}  {_format_percent(row.AP):>8}  {row.injected_images:>8}  {row.short_images:>6}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class PurityReport:
    detections: int
    on_target: int

    @property
    def purity(self) -> Optional[float]:
        return self.on_target / self.detections if self.detections else None


def conditioning_purity(
    model: TargetedDetector,
    store: AnnotationStore,
    tokenizer: Tokenizer,
    cfg: EvalConfig,
    score_threshold: float = 0.5,
    image_ids: Optional[Sequence[int]] = None,
) -> PurityReport:
    """
    For every image and every category present in it, target that single
    category and count confident detections carrying it.
    """
    image_ids = list(store.image_ids if image_ids is None else image_ids)
    image_size = model.cfg.image_size
    total = 0
    on_target = 0
    for image_id in image_ids:
        annotation = store.annotation(image_id)
        image = store.load_image(image_id, image_size)
        for name in annotation.category_names:
            tokens = tokenizer.encode([name], model.cfg.n_target_queries, model.cfg.max_targets_per_sample)
            pred = model.forward(image, tokens)
            target_class = store.category_names.index(name)
            for det in detections_from_prediction(pred, image_id, cfg, image_size):
                if det.score > score_threshold:
                    total += 1
                    on_target += det.class_id == target_class
    return PurityReport(total, on_target)

"""
Conversion of object-detection annotations into targeted-detection samples.

For each image a number of categories S (1 <= S <= M) is drawn, S categories
are sampled without replacement, every instance of those categories is kept,
the category names become the target phrases and each instance is labelled
with the index of its phrase. With a configured probability the special
``[all]`` phrase replaces sampling and every instance is a target.
"""
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Collection, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from targeted_detector.config import SamplingConfig
from targeted_detector.errors import AnnotationError, DatasetError, SamplingError
from targeted_detector.tokenizer import ALL
from targeted_detector.worker_pool import run_parallel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Box = Tuple[float, float, float, float]

_BOUNDS_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class InstanceRecord:
    image_id: int
    category_id: int
    bbox: Box  # absolute x, y, w, h in pixels


@dataclass(frozen=True)
class Category:
    category_id: int
    name: str


@dataclass(frozen=True)
class AnnotatedObject:
    """One instance with its contiguous class id, category name and normalized box."""

    class_id: int
    name: str
    box: Box


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: int
    width: int
    height: int
    objects: Tuple[AnnotatedObject, ...]

    @property
    def category_names(self) -> List[str]:
        """Distinct category names present, ordered by class id."""
        seen = {}
        for obj in sorted(self.objects, key=lambda o: o.class_id):
            seen.setdefault(obj.name, obj.class_id)
        return list(seen)


@dataclass(frozen=True)
class TargetInstance:
    box: Box  # normalized cx, cy, w, h
    class_id: int
    target_index: int


@dataclass(frozen=True)
class TargetedSample:
    image_id: int
    target_phrases: Tuple[str, ...]
    instances: Tuple[TargetInstance, ...]
    rng_seed_used: int
    deceptive_count: int = 0

    @property
    def is_all(self) -> bool:
        return self.target_phrases == (ALL,)

    @property
    def genuine_phrases(self) -> Tuple[str, ...]:
        end = len(self.target_phrases) - self.deceptive_count
        return self.target_phrases[:end]

    def to_record(self) -> str:
        payload = {
            "image_id": self.image_id,
            "phrases": list(self.target_phrases),
            "instances": [
                {"box": list(inst.box), "class_id": inst.class_id, "target_index": inst.target_index}
                for inst in self.instances
            ],
            "seed": self.rng_seed_used,
            "deceptive": self.deceptive_count,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, line: str, lineno: Optional[int] = None) -> "TargetedSample":
        try:
            payload = json.loads(line)
            instances = tuple(
                TargetInstance(
                    box=tuple(float(v) for v in inst["box"]),
                    class_id=int(inst["class_id"]),
                    target_index=int(inst["target_index"]),
                )
                for inst in payload["instances"]
            )
            return cls(
                image_id=int(payload["image_id"]),
                target_phrases=tuple(str(p) for p in payload["phrases"]),
                instances=instances,
                rng_seed_used=int(payload["seed"]),
                deceptive_count=int(payload.get("deceptive", 0)),
            )
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"invalid targeted record: {exc.msg}", line=lineno) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"targeted record missing or bad field: {exc}", line=lineno) from exc


@dataclass
class AnnotationStore:
    """
    A COCO-subset annotation set: images, instances and categories.

    ``root`` resolves image file names; ``pixels`` optionally holds images in
    memory (H x W x 3 uint8) keyed by image id.
    """

    images: List[ImageRecord]
    instances: List[InstanceRecord]
    categories: List[Category]
    root: Path = field(default_factory=Path)
    pixels: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.categories = sorted(self.categories, key=lambda c: c.category_id)
        self._images = {img.image_id: img for img in self.images}
        self._categories = {c.category_id: c for c in self.categories}
        self._class_index = {c.category_id: i for i, c in enumerate(self.categories)}
        self._by_image: Dict[int, List[InstanceRecord]] = {img.image_id: [] for img in self.images}
        self.validate()
        for inst in self.instances:
            self._by_image[inst.image_id].append(inst)

    def validate(self) -> None:
        if len(self._images) != len(self.images):
            raise AnnotationError("duplicate image ids")
        if len(self._categories) != len(self.categories):
            raise AnnotationError("duplicate category ids")
        for inst in self.instances:
            image = self._images.get(inst.image_id)
            if image is None:
                raise AnnotationError("instance references an unknown image", image_id=inst.image_id)
            if inst.category_id not in self._categories:
                raise AnnotationError(
                    f"instance references unknown category {inst.category_id}", image_id=inst.image_id
                )
            x, y, w, h = inst.bbox
            if w <= 0 or h <= 0:
                raise AnnotationError("box with non-positive width or height", image_id=inst.image_id)
            if (
                x < -_BOUNDS_TOLERANCE
                or y < -_BOUNDS_TOLERANCE
                or x + w > image.width + _BOUNDS_TOLERANCE
                or y + h > image.height + _BOUNDS_TOLERANCE
            ):
                raise AnnotationError("box outside image bounds", image_id=inst.image_id)

    @property
    def category_names(self) -> List[str]:
        """Names in class-id order."""
        return [c.name for c in self.categories]

    @property
    def image_ids(self) -> List[int]:
        return [img.image_id for img in self.images]

    def image(self, image_id: int) -> ImageRecord:
        try:
            return self._images[image_id]
        except KeyError:
            raise AnnotationError("unknown image id", image_id=image_id) from None

    def class_index(self, category_id: int) -> int:
        return self._class_index[category_id]

    def annotation(self, image_id: int) -> ImageAnnotation:
        """The image's instances with normalized (cx, cy, w, h) boxes."""
        image = self.image(image_id)
        objects = []
        for inst in self._by_image[image_id]:
            objects.append(
                AnnotatedObject(
                    class_id=self._class_index[inst.category_id],
                    name=self._categories[inst.category_id].name,
                    box=normalize_box(inst.bbox, image.width, image.height),
                )
            )
        return ImageAnnotation(image_id, image.width, image.height, tuple(objects))

    def load_image(self, image_id: int, size: Optional[int] = None) -> np.ndarray:
        """RGB pixels as floats in [0, 1], resized to ``size`` x ``size`` when given."""
        pixels = self.pixels.get(image_id)
        if pixels is None:
            path = self.root / self.image(image_id).file_name
            with Image.open(path) as img:
                rgb = img.convert("RGB")
                if size is not None and rgb.size != (size, size):
                    rgb = rgb.resize((size, size), Image.BILINEAR)
                pixels = np.asarray(rgb, dtype=np.uint8)
        elif size is not None and pixels.shape[:2] != (size, size):
            resized = Image.fromarray(pixels).resize((size, size), Image.BILINEAR)
            pixels = np.asarray(resized, dtype=np.uint8)
        return pixels.astype(np.float64) / 255.0

    def to_json(self) -> dict:
        return {
            "images": [
                {"id": i.image_id, "file_name": i.file_name, "width": i.width, "height": i.height}
                for i in self.images
            ],
            "annotations": [
                {"id": n, "image_id": a.image_id, "category_id": a.category_id, "bbox": list(a.bbox)}
                for n, a in enumerate(self.instances, start=1)
            ],
            "categories": [{"id": c.category_id, "name": c.name} for c in self.categories],
        }

    def save(self, path: PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: PathLike) -> "AnnotationStore":
        """Parse a COCO-style file. Unknown fields are ignored; missing ones are errors."""
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise AnnotationError(f"cannot read annotation file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"malformed annotation file {path}: {exc.msg}", line=exc.lineno) from exc
        return cls.from_json(payload, root=path.parent)

    @classmethod
    def from_json(cls, payload: dict, root: Path = Path(".")) -> "AnnotationStore":
        try:
            images = [
                ImageRecord(int(i["id"]), str(i["file_name"]), int(i["width"]), int(i["height"]))
                for i in payload["images"]
            ]
            categories = [Category(int(c["id"]), str(c["name"])) for c in payload["categories"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"missing or invalid image/category field: {exc}") from exc
        instances = []
        for a in payload.get("annotations", []):
            try:
                bbox = tuple(float(v) for v in a["bbox"])
                if len(bbox) != 4:
                    raise ValueError("bbox needs 4 values")
                instances.append(InstanceRecord(int(a["image_id"]), int(a["category_id"]), bbox))
            except (KeyError, TypeError, ValueError) as exc:
                raise AnnotationError(
                    f"missing or invalid annotation field: {exc}", image_id=a.get("image_id")
                ) from exc
        return cls(images=images, instances=instances, categories=categories, root=root)


def normalize_box(bbox: Sequence[float], width: int, height: int) -> Box:
    """Absolute (x, y, w, h) -> normalized (cx, cy, w, h)."""
    x, y, w, h = bbox
    return ((x + w / 2.0) / width, (y + h / 2.0) / height, w / width, h / height)


def image_seed(global_seed: int, image_id: int, epoch: int) -> int:
    """Per-image seed, independent of iteration order and worker count."""
    digest = hashlib.blake2b(f"{global_seed}:{image_id}:{epoch}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sample_targets(annotation: ImageAnnotation, rng: np.random.Generator, seed_used: int = 0) -> TargetedSample:
    """
    Draw S uniformly from 1..M, then S distinct categories uniformly; every
    instance of a chosen category becomes a target labelled with its phrase index.
    """
    names = annotation.category_names
    n_categories = len(names)
    if n_categories == 0:
        return TargetedSample(annotation.image_id, (), (), seed_used)
    n_sampled = int(rng.integers(1, n_categories + 1))
    chosen = [names[i] for i in rng.choice(n_categories, size=n_sampled, replace=False)]
    instances = [
        TargetInstance(obj.box, obj.class_id, target_index)
        for target_index, name in enumerate(chosen)
        for obj in annotation.objects
        if obj.name == name
    ]
    return TargetedSample(annotation.image_id, tuple(chosen), tuple(instances), seed_used)


def all_token_sample(annotation: ImageAnnotation, seed_used: int = 0) -> TargetedSample:
    """Every instance is a target of the single ``[all]`` phrase."""
    if not annotation.objects:
        return TargetedSample(annotation.image_id, (), (), seed_used)
    instances = tuple(TargetInstance(obj.box, obj.class_id, 0) for obj in annotation.objects)
    return TargetedSample(annotation.image_id, (ALL,), instances, seed_used)


def all_named_sample(annotation: ImageAnnotation, seed_used: int = 0) -> TargetedSample:
    """Every category present is named as a target, in class-id order."""
    names = annotation.category_names
    instances = tuple(
        TargetInstance(obj.box, obj.class_id, t)
        for t, name in enumerate(names)
        for obj in annotation.objects
        if obj.name == name
    )
    return TargetedSample(annotation.image_id, tuple(names), instances, seed_used)


def make_sample(
    annotation: ImageAnnotation, cfg: SamplingConfig, rng: np.random.Generator, seed_used: int = 0
) -> TargetedSample:
    """An ``[all]`` sample with probability ``all_token_probability``, else sampled targets."""
    if not annotation.objects:
        return TargetedSample(annotation.image_id, (), (), seed_used)
    if rng.random() < cfg.all_token_probability:
        return all_token_sample(annotation, seed_used)
    return sample_targets(annotation, rng, seed_used)


def deceptive_count(n_targets: int, rate: float) -> int:
    """max(1, floor(N * r))."""
    return max(1, int(math.floor(n_targets * rate + 1e-9)))


def inject_deceptive(
    sample: TargetedSample,
    universe: Sequence[str],
    rate: float,
    rng: np.random.Generator,
    present: Collection[str],
) -> TargetedSample:
    """
    Append max(1, floor(N * r)) phrases naming categories absent from the image.

    ``present`` holds the category names annotated in the image. No instances
    are added, so genuine target indices are unchanged.
    """
    if rate <= 0:
        raise SamplingError("deceptive rate must be positive")
    count = deceptive_count(len(sample.genuine_phrases), rate)
    present = set(present)
    absent = [name for name in universe if name not in present]
    if len(absent) < count:
        raise SamplingError(
            f"image {sample.image_id}: need {count} absent categories, only {len(absent)} available"
        )
    picked = [absent[i] for i in rng.choice(len(absent), size=count, replace=False)]
    return replace(
        sample,
        target_phrases=sample.target_phrases + tuple(picked),
        deceptive_count=sample.deceptive_count + count,
    )


def convert_image(
    store: AnnotationStore, cfg: SamplingConfig, image_id: int, epoch: int
) -> TargetedSample:
    seed = image_seed(cfg.global_seed, image_id, epoch)
    rng = np.random.default_rng(seed)
    annotation = store.annotation(image_id)
    sample = make_sample(annotation, cfg, rng, seed)
    if cfg.deceptive_rate > 0 and sample.target_phrases and not sample.is_all:
        try:
            sample = inject_deceptive(
                sample, store.category_names, cfg.deceptive_rate, rng, annotation.category_names
            )
        except SamplingError as exc:
            logger.debug("%s", exc)
    return sample


def convert_dataset(
    store: AnnotationStore, cfg: SamplingConfig, epochs_of_sampling: int = 1, workers: int = 1
) -> List[TargetedSample]:
    """
    Targeted samples for every image and sampling epoch.

    Args:
        store: Source annotations
        cfg: [all] probability, deceptive rate and global seed
        epochs_of_sampling: Independent draws per image
        workers: Number of worker slots; output is identical for any value

    Returns:
        Samples in epoch-major, store order
    """
    jobs = [(image_id, epoch) for epoch in range(epochs_of_sampling) for image_id in store.image_ids]
    samples = run_parallel(lambda job: convert_image(store, cfg, job[0], job[1]), jobs, workers)
    if cfg.deceptive_rate > 0:
        short = sum(
            1
            for sample in samples
            if sample.target_phrases and not sample.is_all and sample.deceptive_count == 0
        )
        if short:
            logger.warning(
                "%d samples had too few absent categories and kept only their genuine phrases", short
            )
    logger.info(
        "Converted %d images x %d epochs into %d targeted samples",
        len(store.images),
        epochs_of_sampling,
        len(samples),
    )
    return samples


def write_targeted_dataset(samples: Iterable[TargetedSample], path: PathLike) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for sample in samples:
            handle.write(sample.to_record() + "\n")
            count += 1
    return count


def load_targeted_dataset(path: PathLike) -> List[TargetedSample]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"targeted dataset {path} does not exist")
    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip():
                samples.append(TargetedSample.from_record(line, lineno))
    return samples


@dataclass
class DatasetStats:
    images: int
    total_instances: int
    categories_per_image: float
    instances_per_image: float
    instances_per_category: float
    instances_per_target: Dict[int, int]
    instances_by_class: Dict[int, int]

    @property
    def targets(self) -> int:
        return sum(self.instances_per_target.values())

    @property
    def single_instance_target_fraction(self) -> float:
        return self.instances_per_target.get(1, 0) / self.targets if self.targets else 0.0

    def class_ratios(self) -> Dict[int, float]:
        total = sum(self.instances_by_class.values())
        return {c: n / total for c, n in sorted(self.instances_by_class.items())} if total else {}

    def format_report(self, class_names: Optional[Sequence[str]] = None) -> str:
        lines = [
            f"images                  {self.images}",
            f"instances               {self.total_instances}",
            f"categories/image        {self.categories_per_image:.4f}",
            f"instances/image         {self.instances_per_image:.4f}",
            f"instances/category      {self.instances_per_category:.4f}",
            f"targets                 {self.targets}",
            f"instances per target = 1: {100.0 * self.single_instance_target_fraction:.2f}%",
            "instances-per-target histogram:",
        ]
        for count, n in sorted(self.instances_per_target.items()):
            lines.append(f"  {count:>4} instances  {n:>8} targets")
        lines.append("instances by category:")
        for class_id, n in sorted(self.instances_by_class.items()):
            label = class_names[class_id] if class_names and class_id < len(class_names) else str(class_id)
            lines.append(f"  {label:<20} {n:>8}")
        return "\n".join(lines)


def dataset_stats(samples: Iterable[TargetedSample]) -> DatasetStats:
    """Counts and means over a sample stream; raises DatasetError when it is empty."""
    images = 0
    total_instances = 0
    category_pairs = 0
    per_target: Counter = Counter()
    by_class: Counter = Counter()
    for sample in samples:
        images += 1
        total_instances += len(sample.instances)
        category_pairs += len({inst.class_id for inst in sample.instances})
        by_class.update(inst.class_id for inst in sample.instances)
        counts = Counter(inst.target_index for inst in sample.instances)
        for t in range(len(sample.target_phrases)):
            per_target[counts.get(t, 0)] += 1
    if images == 0:
        raise DatasetError("cannot compute statistics of an empty dataset")
    return DatasetStats(
        images=images,
        total_instances=total_instances,
        categories_per_image=category_pairs / images,
        instances_per_image=total_instances / images,
        instances_per_category=total_instances / category_pairs if category_pairs else 0.0,
        instances_per_target=dict(sorted(per_target.items())),
        instances_by_class=dict(sorted(by_class.items())),
    )


def source_class_ratios(store: AnnotationStore) -> Dict[int, float]:
    counts = Counter(store.class_index(inst.category_id) for inst in store.instances)
    total = sum(counts.values())
    return {c: n / total for c, n in sorted(counts.items())} if total else {}

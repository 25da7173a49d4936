"""
Synthetic shapes dataset: colored squares, circles and triangles on a noise
background, with tight bounding boxes taken from each shape's own mask.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from targeted_detector.dataprep import AnnotationStore, Category, ImageRecord, InstanceRecord
from targeted_detector.errors import DatasetError

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = ("square", "circle", "triangle")

# Base colors per category; every color keeps one channel >= 128 so shapes
# stand out against the 0..63 background.
_BASE_COLORS = (
    (220, 60, 60),
    (60, 200, 70),
    (70, 90, 230),
    (230, 210, 60),
    (200, 70, 210),
    (60, 210, 210),
)
_COLOR_JITTER = 25
_MAX_SHAPES = 5
_PLACEMENT_ATTEMPTS = 50


def _shape_color(category_index: int, rng: np.random.Generator) -> Tuple[int, int, int]:
    base = np.array(_BASE_COLORS[category_index % len(_BASE_COLORS)])
    color = np.clip(base + rng.integers(-_COLOR_JITTER, _COLOR_JITTER + 1, size=3), 0, 255)
    return tuple(int(c) for c in color)


def _draw_mask(kind: str, size: int, x: int, y: int, extent: int) -> np.ndarray:
    mask = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask)
    x1, y1 = x + extent - 1, y + extent - 1
    if kind == "circle":
        draw.ellipse([x, y, x1, y1], fill=255)
    elif kind == "triangle":
        draw.polygon([(x, y1), (x1, y1), (x + (extent - 1) / 2.0, y)], fill=255)
    else:
        draw.rectangle([x, y, x1, y1], fill=255)
    return np.asarray(mask) > 0


def mask_box(mask: np.ndarray) -> Optional[Tuple[float, float, float, float]]:
    """Tight (x, y, w, h) around the set pixels of a mask, or None when empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if not len(rows):
        return None
    x0, y0 = int(cols[0]), int(rows[0])
    return (float(x0), float(y0), float(cols[-1] + 1 - x0), float(rows[-1] + 1 - y0))


def render_shapes_image(
    image_size: int,
    categories: Sequence[str],
    rng: np.random.Generator,
) -> Tuple[np.ndarray, List[Tuple[int, Tuple[float, float, float, float]]]]:
    """
    One image with 1-5 non-overlapping shapes.

    Returns:
        (H x W x 3 uint8 pixels, list of (category index, tight xywh box))
    """
    pixels = rng.integers(0, 64, size=(image_size, image_size, 3)).astype(np.uint8)
    occupied = np.zeros((image_size, image_size), dtype=bool)
    min_extent = max(4, image_size // 8)
    max_extent = max(min_extent + 1, image_size * 2 // 5)

    objects = []
    for _ in range(int(rng.integers(1, _MAX_SHAPES + 1))):
        category = int(rng.integers(0, len(categories)))
        color = _shape_color(category, rng)
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            extent = int(rng.integers(min_extent, max_extent + 1))
            x = int(rng.integers(0, image_size - extent + 1))
            y = int(rng.integers(0, image_size - extent + 1))
            mask = _draw_mask(categories[category], image_size, x, y, extent)
            box = mask_box(mask)
            if box is None or (mask & occupied).any():
                continue
            occupied |= mask
            pixels[mask] = color
            objects.append((category, box))
            break
    return pixels, objects


def generate_shapes_dataset(
    n_images: int,
    image_size: int,
    seed: int,
    categories: Sequence[str] = DEFAULT_CATEGORIES,
) -> AnnotationStore:
    """
    Build an in-memory annotation store of synthetic images.

    Image ``i`` is drawn from its own generator seeded by ``(seed, i)``, so
    the set is identical for a given seed regardless of ``n_images``.
    """
    if n_images < 1:
        raise DatasetError("n_images must be at least 1")
    if not categories:
        raise DatasetError("at least one shape category is required")

    images: List[ImageRecord] = []
    instances: List[InstanceRecord] = []
    pixels: Dict[int, np.ndarray] = {}
    for index in range(n_images):
        image_id = index + 1
        rng = np.random.default_rng([seed, index])
        raster, objects = render_shapes_image(image_size, categories, rng)
        images.append(ImageRecord(image_id, f"images/{image_id:05d}.ppm", image_size, image_size))
        pixels[image_id] = raster
        instances.extend(InstanceRecord(image_id, category + 1, box) for category, box in objects)

    store = AnnotationStore(
        images=images,
        instances=instances,
        categories=[Category(i + 1, name) for i, name in enumerate(categories)],
        pixels=pixels,
    )
    logger.info("Generated %d shape images with %d instances", len(images), len(instances))
    return store


def write_shapes_dataset(store: AnnotationStore, out_dir: Union[str, Path]) -> Path:
    """Write P6 PPM images and ``annotations.json``; returns the annotation path."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        for record in store.images:
            Image.fromarray(store.pixels[record.image_id]).save(
                out_dir / record.file_name, format="PPM"
            )
        annotation_path = out_dir / "annotations.json"
        store.save(annotation_path)
    except OSError as exc:
        raise DatasetError(f"cannot write shapes dataset to {out_dir}: {exc}") from exc
    store.root = out_dir
    return annotation_path

"""
Attention and prediction dumps for one image and target text.
"""
import csv
import logging
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from PIL import Image

from targeted_detector.model import DetectionSet, LayerAttention

logger = logging.getLogger(__name__)

ATTENTION_HEADER = ("query_index", "key_index", "weight")
PREDICTION_HEADER = (
    "slot",
    "cx",
    "cy",
    "w",
    "h",
    "class_name",
    "class_score",
    "target_index",
    "target_score",
)


def write_attention_csv(path: Union[str, Path], weights: np.ndarray) -> None:
    """One row per (query, key) pair of a queries x keys matrix."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(ATTENTION_HEADER)
        for q in range(weights.shape[0]):
            for k in range(weights.shape[1]):
                writer.writerow((q, k, repr(float(weights[q, k]))))


def attention_raster(row: np.ndarray, grid_size: int) -> np.ndarray:
    """Scale one L-length attention row to 8-bit and reshape it to the feature grid."""
    peak = row.max()
    scaled = row / peak if peak > 0 else np.zeros_like(row)
    return np.round(scaled * 255.0).astype(np.uint8).reshape(grid_size, grid_size)


def dump_attention(
    out_dir: Union[str, Path],
    layers: Sequence[LayerAttention],
    grid_size: int,
    write_rasters: bool = True,
) -> List[Path]:
    """
    Write ``layer{l}_head{h}_target_attention.csv`` and
    ``layer{l}_head{h}_self_attention.csv`` for every decoder layer and head,
    plus 8-bit PGM maps of each object query's target attention.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for layer_index, layer in enumerate(layers):
        for head in range(layer.target_attention.shape[0]):
            stem = f"layer{layer_index}_head{head}"
            target_path = out_dir / f"{stem}_target_attention.csv"
            self_path = out_dir / f"{stem}_self_attention.csv"
            write_attention_csv(target_path, layer.target_attention[head])
            write_attention_csv(self_path, layer.self_attention[head])
            written.extend([target_path, self_path])
            if write_rasters:
                for query, row in enumerate(layer.target_attention[head]):
                    raster_path = out_dir / f"{stem}_query{query}.pgm"
                    Image.fromarray(attention_raster(row, grid_size)).save(raster_path, format="PPM")
                    written.append(raster_path)
    logger.info("Wrote %d attention files to %s", len(written), out_dir)
    return written


def dump_predictions(
    path: Union[str, Path], pred: DetectionSet, class_names: Sequence[str]
) -> Path:
    class_probs = pred.class_probs()
    index_probs = pred.target_index_probs()
    names = list(class_names) + ["no-object"]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PREDICTION_HEADER)
        for slot in range(len(pred)):
            class_id = int(class_probs[slot].argmax())
            target_index = int(index_probs[slot].argmax())
            box = pred.boxes.data[slot]
            writer.writerow(
                (
                    slot,
                    *(repr(float(v)) for v in box),
                    names[class_id] if class_id < len(names) else str(class_id),
                    repr(float(class_probs[slot, class_id])),
                    target_index if target_index < index_probs.shape[1] - 1 else "none",
                    repr(float(index_probs[slot, target_index])),
                )
            )
    return Path(path)

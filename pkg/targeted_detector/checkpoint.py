"""
LTD-CKPT-1 checkpoints: a text manifest plus one flat little-endian float64 blob.

Manifest layout::

    LTD-CKPT-1
    step 120
    param encoder.0.attn.q.weight 64,64 0
    param encoder.0.attn.q.bias 64 32768
    ...

Offsets are in bytes into ``<stem>.bin``.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from targeted_detector.errors import CheckpointError
from targeted_detector.tensor import Tensor

logger = logging.getLogger(__name__)

HEADER = "LTD-CKPT-1"
_DTYPE = np.dtype("<f8")

PathLike = Union[str, Path]


@dataclass
class Checkpoint:
    step: int
    arrays: Dict[str, np.ndarray]


def checkpoint_paths(stem: PathLike) -> Tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_name(stem.name + ".manifest"), stem.with_name(stem.name + ".bin")


def checkpoint_exists(stem: PathLike) -> bool:
    manifest, blob = checkpoint_paths(stem)
    return manifest.exists() and blob.exists()


def save_checkpoint(stem: PathLike, arrays: Dict[str, np.ndarray], step: int) -> Path:
    """Write ``arrays`` in insertion order and return the manifest path."""
    manifest_path, blob_path = checkpoint_paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    lines = [HEADER, f"step {int(step)}"]
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, array in arrays.items():
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"{HEADER}: parameter name {name!r} contains whitespace")
            data = np.ascontiguousarray(array, dtype=_DTYPE)
            shape = ",".join(str(s) for s in data.shape)
            lines.append(f"param {name} {shape} {offset}")
            blob.write(data.tobytes())
            offset += data.nbytes
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Saved checkpoint %s (step %d, %d arrays)", manifest_path, step, len(arrays))
    return manifest_path


def load_checkpoint(stem: PathLike) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Args:
        stem: Path without the ``.manifest`` / ``.bin`` suffix

    Returns:
        Checkpoint holding the training step and every named array

    Raises:
        CheckpointError: missing files, wrong header or a truncated blob
    """
    manifest_path, blob_path = checkpoint_paths(stem)
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"{HEADER}: no checkpoint at {stem}")

    lines = manifest_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != HEADER:
        found = lines[0].strip() if lines else "<empty>"
        raise CheckpointError(f"{HEADER}: unsupported checkpoint header {found!r}")

    blob = blob_path.read_bytes()
    step = 0
    arrays: Dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "step" and len(parts) == 2:
            step = int(parts[1])
        elif parts[0] == "param" and len(parts) == 4:
            name, shape_text, offset_text = parts[1], parts[2], int(parts[3])
            shape = tuple(int(s) for s in shape_text.split(",") if s)
            count = int(np.prod(shape)) if shape else 1
            end = offset_text + count * _DTYPE.itemsize
            if end > len(blob):
                raise CheckpointError(f"{HEADER}: {name} runs past the end of the blob")
            arrays[name] = (
                np.frombuffer(blob[offset_text:end], dtype=_DTYPE).astype(np.float64).reshape(shape)
            )
        else:
            raise CheckpointError(f"{HEADER}: malformed manifest line {lineno}: {line!r}")
    return Checkpoint(step=step, arrays=arrays)


def restore_parameters(params: Dict[str, Tensor], arrays: Dict[str, np.ndarray]) -> None:
    """Copy stored arrays into ``params``; every parameter must be present with its shape."""
    for name, p in params.items():
        stored = arrays.get(name)
        if stored is None:
            raise CheckpointError(f"{HEADER}: checkpoint has no parameter {name}")
        if stored.shape != p.shape:
            raise CheckpointError(
                f"{HEADER}: shape mismatch for {name}: checkpoint {stored.shape}, model {p.shape}"
            )
        p.data = stored.copy()

"""
Pytest configuration and fixtures.
"""
import numpy as np
import pytest

from targeted_detector.config import ModelConfig, RunConfig, parse_assignments
from targeted_detector.dataprep import AnnotationStore, Category, ImageRecord, InstanceRecord
from targeted_detector.model import TargetedDetector
from targeted_detector.shapes import generate_shapes_dataset
from targeted_detector.tensor import set_debug_checks
from targeted_detector.tokenizer import Tokenizer


@pytest.fixture(autouse=True)
def reset_debug_checks():
    """Every test starts and ends with the NaN/Inf check off."""
    set_debug_checks(False)
    yield
    set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """A model small enough for finite-difference checks."""
    return ModelConfig(
        image_size=16,
        patch_size=8,
        d_model=8,
        n_heads=2,
        n_encoder_layers=1,
        n_decoder_layers=2,
        n_object_queries=4,
        n_target_queries=6,
        n_classes=3,
        vocab_size=8,
        ffn_dim=12,
        max_targets_per_sample=3,
    )


@pytest.fixture
def tiny_model(tiny_model_config):
    return TargetedDetector(tiny_model_config, seed=0)


@pytest.fixture
def tokenizer():
    return Tokenizer.from_category_names(["square", "circle", "triangle"])


@pytest.fixture
def crafted_store():
    """
    Three 100 x 200 images:
      1: two squares and one circle
      2: one triangle
      3: no annotations
    """
    images = [
        ImageRecord(1, "a.ppm", 100, 200),
        ImageRecord(2, "b.ppm", 100, 200),
        ImageRecord(3, "c.ppm", 100, 200),
    ]
    instances = [
        InstanceRecord(1, 10, (10.0, 20.0, 30.0, 40.0)),
        InstanceRecord(1, 10, (50.0, 100.0, 20.0, 20.0)),
        InstanceRecord(1, 20, (0.0, 0.0, 100.0, 200.0)),
        InstanceRecord(2, 30, (5.0, 5.0, 10.0, 10.0)),
    ]
    categories = [Category(10, "square"), Category(20, "circle"), Category(30, "triangle")]
    pixels = {i: np.zeros((200, 100, 3), dtype=np.uint8) for i in (1, 2, 3)}
    return AnnotationStore(images, instances, categories, pixels=pixels)


@pytest.fixture
def shapes_store():
    return generate_shapes_dataset(8, 16, seed=3)


@pytest.fixture
def run_config_factory(tmp_path):
    """Build a RunConfig from key/value overrides on top of a small test setup."""

    def factory(**overrides) -> RunConfig:
        pairs = {
            "seed": "11",
            "model.image_size": "16",
            "model.patch_size": "8",
            "model.d_model": "8",
            "model.n_heads": "2",
            "model.n_encoder_layers": "1",
            "model.n_decoder_layers": "1",
            "model.n_object_queries": "6",
            "model.n_target_queries": "6",
            "model.ffn_dim": "12",
            "model.max_targets_per_sample": "3",
            "train.batch_size": "2",
            "train.steps": "4",
            "train.checkpoint_every": "2",
            "train.log_every": "1",
            "train.show_progress": "false",
            "optim.lr": "0.001",
            "paths.annotations": str(tmp_path / "data" / "annotations.json"),
            "paths.dataset": str(tmp_path / "data" / "targeted.jsonl"),
            "paths.checkpoint": str(tmp_path / "runs" / "model"),
            "paths.out_dir": str(tmp_path / "runs"),
        }
        pairs.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
        return parse_assignments(pairs)

    return factory

"""
Training: one optimizer step per batch of targeted samples, a CSV loss log,
periodic LTD-CKPT-1 checkpoints and bit-identical resume.
"""
import csv
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from targeted_detector.checkpoint import (
    checkpoint_exists,
    load_checkpoint,
    restore_parameters,
    save_checkpoint,
)
from targeted_detector.config import ModelConfig, RunConfig
from targeted_detector.dataprep import AnnotationStore, TargetedSample
from targeted_detector.errors import CheckpointError, DatasetError, NonFiniteError
from targeted_detector.loss import LossBreakdown, set_loss
from targeted_detector.matching import GroundTruthSet, match
from targeted_detector.model import TargetedDetector
from targeted_detector.optim import AdamW
from targeted_detector.tensor import GradientTape, add_n, scale
from targeted_detector.tokenizer import TokenSequence, Tokenizer, load_word_vectors

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "loss", "loss_class", "loss_box", "loss_index")


@dataclass
class TrainingExample:
    image_id: int
    image: np.ndarray
    tokens: TokenSequence
    targets: GroundTruthSet


def resolve_model_config(model_cfg: ModelConfig, store: AnnotationStore, tokenizer: Tokenizer) -> ModelConfig:
    """Fill class count and vocabulary size from the data when left at 0."""
    return dataclasses.replace(
        model_cfg,
        n_classes=model_cfg.n_classes or len(store.categories),
        vocab_size=model_cfg.vocab_size or tokenizer.vocab_size,
    )


def build_example(
    sample: TargetedSample,
    store: AnnotationStore,
    tokenizer: Tokenizer,
    cfg: ModelConfig,
    image: Optional[np.ndarray] = None,
) -> TrainingExample:
    """
    Tokenize a sample's phrases and gather its ground truth. Instances whose
    phrase did not fit into the token sequence are dropped.
    """
    tokens = tokenizer.encode(sample.target_phrases, cfg.n_target_queries, cfg.max_targets_per_sample)
    kept = [inst for inst in sample.instances if inst.target_index < tokens.n_phrases]
    if len(kept) < len(sample.instances):
        logger.warning(
            "Image %d: dropped %d instances whose target phrase was truncated",
            sample.image_id,
            len(sample.instances) - len(kept),
        )
    if kept:
        targets = GroundTruthSet(
            np.array([inst.box for inst in kept]),
            np.array([inst.class_id for inst in kept]),
            np.array([inst.target_index for inst in kept]),
        )
    else:
        targets = GroundTruthSet.empty()
    if image is None:
        image = store.load_image(sample.image_id, cfg.image_size)
    return TrainingExample(sample.image_id, image, tokens, targets)


def build_examples(
    samples: Sequence[TargetedSample], store: AnnotationStore, tokenizer: Tokenizer, cfg: ModelConfig
) -> List[TrainingExample]:
    images: Dict[int, np.ndarray] = {}
    examples = []
    for sample in samples:
        if sample.image_id not in images:
            images[sample.image_id] = store.load_image(sample.image_id, cfg.image_size)
        examples.append(build_example(sample, store, tokenizer, cfg, image=images[sample.image_id]))
    return examples


def train_step(
    model: TargetedDetector,
    batch: Sequence[TrainingExample],
    optimizer: AdamW,
    weights,
) -> LossBreakdown:
    """
    Forward, match, loss, backward and one AdamW update over a batch.

    The batch loss is the mean of the per-sample losses. Returns the loss
    breakdown computed before the update.
    """
    if not batch:
        raise DatasetError("cannot train on an empty batch")
    optimizer.zero_grad()
    breakdowns = []
    with GradientTape() as tape:
        losses = []
        for example in batch:
            pred = model.forward(example.image, example.tokens)
            assignment = match(pred, example.targets, weights)
            loss, breakdown = set_loss(pred, example.targets, assignment, weights)
            losses.append(loss)
            breakdowns.append(breakdown)
        total = scale(add_n(losses), 1.0 / len(losses))
    if not np.isfinite(total.item()):
        raise NonFiniteError(f"non-finite training loss {total.item()}")
    tape.backward(total)
    optimizer.step()
    return LossBreakdown.mean(breakdowns)


def sample_batch_indices(seed: int, step: int, n_examples: int, batch_size: int) -> np.ndarray:
    """Batch for ``step`` from a generator seeded by (seed, step); no carried RNG state."""
    rng = np.random.default_rng([seed, step])
    return rng.choice(n_examples, size=batch_size, replace=batch_size > n_examples)


def _rewrite_log(path: Path, keep_until: int) -> None:
    """Keep the header and rows up to ``keep_until`` so a resumed run appends cleanly."""
    rows = []
    if path.exists() and keep_until > 0:
        with open(path, "r", newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            next(reader, None)
            rows = [row for row in reader if row and int(row[0]) <= keep_until]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


class Trainer:
    """
    Owns the model and optimizer for one run and drives the step loop.
    """

    def __init__(
        self,
        cfg: RunConfig,
        store: AnnotationStore,
        samples: Sequence[TargetedSample],
        tokenizer: Tokenizer,
    ) -> None:
        if not samples:
            raise DatasetError("training dataset is empty")
        self.cfg = cfg
        self.model_cfg = resolve_model_config(cfg.model, store, tokenizer)
        self.model = TargetedDetector(self.model_cfg, seed=cfg.seed)
        if cfg.paths.word_vectors:
            vectors = load_word_vectors(cfg.paths.word_vectors, tokenizer, self.model_cfg.d_model)
            self.model.load_token_vectors(vectors)
        self.optimizer = AdamW(
            self.model.parameters(trainable_only=True),
            lr=cfg.optim.lr,
            betas=cfg.optim.betas,
            eps=cfg.optim.eps,
            weight_decay=cfg.optim.weight_decay,
        )
        self.examples = build_examples(samples, store, tokenizer, self.model_cfg)
        self.checkpoint_stem = Path(cfg.paths.checkpoint)
        self.log_path = Path(cfg.paths.out_dir) / "loss_log.csv"
        self.step = 0

    def resume(self) -> int:
        """Restore parameters and optimizer moments if a checkpoint exists; returns its step."""
        if not checkpoint_exists(self.checkpoint_stem):
            return 0
        ckpt = load_checkpoint(self.checkpoint_stem)
        params = {k: v for k, v in ckpt.arrays.items() if not k.startswith("optim.")}
        restore_parameters(self.model.parameters(), params)
        self.optimizer.load_moments(ckpt.arrays, ckpt.step)
        self.step = ckpt.step
        logger.info("Resumed from %s at step %d", self.checkpoint_stem, ckpt.step)
        return ckpt.step

    def save(self) -> Path:
        arrays = dict(self.model.state_arrays())
        arrays.update(self.optimizer.moments())
        path = save_checkpoint(self.checkpoint_stem, arrays, self.step)
        logger.info("Saved checkpoint at step %d to %s", self.step, path)
        return path

    def run(self, steps: Optional[int] = None, resume: bool = True) -> List[LossBreakdown]:
        """
        Train until ``steps`` total steps.

        Args:
            steps: Total step count to reach, ``train.steps`` by default
            resume: Continue from the checkpoint when one exists

        Returns:
            Loss breakdown of every step run in this call

        Raises:
            CheckpointError: the checkpoint is already past ``steps``
        """
        train_cfg = self.cfg.train
        total_steps = train_cfg.steps if steps is None else steps
        if resume:
            self.resume()
        if self.step > total_steps:
            raise CheckpointError(
                f"checkpoint is at step {self.step}, beyond the requested {total_steps} steps"
            )
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        _rewrite_log(self.log_path, self.step)

        history: List[LossBreakdown] = []
        progress = tqdm(
            range(self.step + 1, total_steps + 1),
            initial=self.step,
            total=total_steps,
            disable=not train_cfg.show_progress,
            desc="train",
        )
        with open(self.log_path, "a", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            for step in progress:
                indices = sample_batch_indices(self.cfg.seed, step, len(self.examples), train_cfg.batch_size)
                batch = [self.examples[i] for i in indices]
                breakdown = train_step(self.model, batch, self.optimizer, self.cfg.loss)
                self.step = step
                history.append(breakdown)
                writer.writerow(
                    (step, breakdown.total, breakdown.class_term, breakdown.box_term, breakdown.index_term)
                )
                if step % train_cfg.log_every == 0:
                    handle.flush()
                    logger.info(
                        "step %d loss %.5f (class %.5f, box %.5f, index %.5f)",
                        step,
                        breakdown.total,
                        breakdown.class_term,
                        breakdown.box_term,
                        breakdown.index_term,
                    )
                if step % train_cfg.checkpoint_every == 0 or step == total_steps:
                    handle.flush()
                    self.save()
        return history


def load_trained_model(
    cfg: RunConfig, store: AnnotationStore, tokenizer: Tokenizer
) -> TargetedDetector:
    """Build the configured network and load its parameters from ``paths.checkpoint``."""
    stem = Path(cfg.paths.checkpoint)
    if not checkpoint_exists(stem):
        raise CheckpointError(f"no checkpoint at {stem}")
    model = TargetedDetector(resolve_model_config(cfg.model, store, tokenizer), seed=cfg.seed)
    ckpt = load_checkpoint(stem)
    restore_parameters(
        model.parameters(), {k: v for k, v in ckpt.arrays.items() if not k.startswith("optim.")}
    )
    logger.info("Loaded model from %s (step %d)", stem, ckpt.step)
    return model

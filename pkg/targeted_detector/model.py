"""
The language-targeted detection network.

Pipeline: patch embedder -> sine positional encoding -> pre-norm transformer
encoder -> conditional decoder over object and target queries -> shared box,
class and target-index heads.
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from targeted_detector.config import ModelConfig
from targeted_detector.errors import DimensionError
from targeted_detector.tensor import (
    Tensor,
    add,
    concat,
    constant,
    embedding_lookup,
    layer_norm,
    matmul,
    narrow,
    parameter,
    relu,
    scale,
    sigmoid,
    softmax,
    softmax_array,
    transpose,
)
from targeted_detector.tokenizer import TokenSequence

logger = logging.getLogger(__name__)


@dataclass
class DetectionSet:
    """
    One prediction per object-query slot.

    ``boxes`` is N x 4 normalized (cx, cy, w, h); ``class_logits`` has an extra
    trailing no-object column; ``target_index_logits`` has an extra trailing
    no-target column.
    """

    boxes: Tensor
    class_logits: Tensor
    target_index_logits: Tensor
    attention: Optional[List["LayerAttention"]] = None

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def class_probs(self) -> np.ndarray:
        return softmax_array(self.class_logits.data, axis=-1)

    def target_index_probs(self) -> np.ndarray:
        return softmax_array(self.target_index_logits.data, axis=-1)


@dataclass
class LayerAttention:
    """
    Attention captured from one decoder layer, one matrix per head.

    ``target_attention`` is heads x N x L (object queries onto image features);
    ``self_attention`` is heads x (N+K) x (N+K). ``target_rows_before`` and
    ``target_rows_after`` are the target-query rows entering and leaving the
    target-attention sub-layer.
    """

    target_attention: np.ndarray
    self_attention: np.ndarray
    target_rows_before: np.ndarray = field(repr=False, default=None)
    target_rows_after: np.ndarray = field(repr=False, default=None)


def positional_encoding(
    seq_len: int, d_model: int, grid_h: int, grid_w: int, temperature: float = 10000.0
) -> np.ndarray:
    """
    Fixed 2-D sine encoding [L x d_model].

    The first half of the channels encodes the row, the second half the column;
    within each half even channels are sines and odd channels cosines of the
    same frequency. Position (0, 0) encodes to sin 0 = 0 and cos 0 = 1.
    """
    if grid_h * grid_w != seq_len:
        raise DimensionError(f"grid {grid_h}x{grid_w} does not cover sequence length {seq_len}")
    if d_model % 4:
        raise DimensionError(f"d_model {d_model} must be divisible by 4")

    half = d_model // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    rows = np.repeat(np.arange(grid_h), grid_w) * (2 * math.pi / grid_h)
    cols = np.tile(np.arange(grid_w), grid_h) * (2 * math.pi / grid_w)

    def encode_axis(coord: np.ndarray) -> np.ndarray:
        angles = coord[:, None] / dim_t[None, :]
        out = np.empty_like(angles)
        out[:, 0::2] = np.sin(angles[:, 0::2])
        out[:, 1::2] = np.cos(angles[:, 1::2])
        return out

    return np.concatenate([encode_axis(rows), encode_axis(cols)], axis=1)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W x 3 image into row-major flattened patches [L x p*p*3]."""
    height, width, channels = image.shape
    gh, gw = height // patch_size, width // patch_size
    patches = image.reshape(gh, patch_size, gw, patch_size, channels)
    return patches.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * channels)


class TargetedDetector:
    """Transformer detector whose decoder is conditioned on target-text queries."""

    def __init__(self, cfg: ModelConfig, seed: int = 0) -> None:
        if cfg.n_classes < 1 or cfg.vocab_size < 1:
            raise DimensionError("n_classes and vocab_size must be resolved before building a model")
        self.cfg = cfg
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._rng = np.random.default_rng(seed)
        self._build()
        self._pos = positional_encoding(cfg.seq_len, cfg.d_model, cfg.grid_size, cfg.grid_size)
        logger.debug(
            "Built detector with %d parameter tensors (%d values)",
            len(self.params),
            sum(p.size for p in self.params.values()),
        )

    # -- parameters -----------------------------------------------------------

    def _add(self, name: str, data: np.ndarray, trainable: bool = True) -> None:
        tensor = parameter(data, name=name)
        tensor.requires_grad = trainable
        self.params[name] = tensor

    def _linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        self._add(f"{name}.weight", self._rng.uniform(-bound, bound, (fan_in, fan_out)))
        self._add(f"{name}.bias", np.zeros(fan_out))

    def _norm(self, name: str) -> None:
        self._add(f"{name}.gain", np.ones(self.cfg.d_model))
        self._add(f"{name}.bias", np.zeros(self.cfg.d_model))

    def _attention_params(self, name: str) -> None:
        d = self.cfg.d_model
        for proj in ("q", "k", "v", "o"):
            self._linear(f"{name}.{proj}", d, d)

    def _ffn_params(self, name: str) -> None:
        self._linear(f"{name}.0", self.cfg.d_model, self.cfg.ffn_dim)
        self._linear(f"{name}.1", self.cfg.ffn_dim, self.cfg.d_model)

    def _build(self) -> None:
        cfg = self.cfg
        d = cfg.d_model
        self._linear("patch", cfg.patch_size * cfg.patch_size * 3, d)

        for i in range(cfg.n_encoder_layers):
            self._norm(f"encoder.{i}.norm1")
            self._attention_params(f"encoder.{i}.attn")
            self._norm(f"encoder.{i}.norm2")
            self._ffn_params(f"encoder.{i}.ffn")

        n_slots = cfg.n_object_queries + cfg.n_target_queries
        self._add("query_embed", self._rng.normal(0.0, 1.0, (n_slots, d)))
        self._add(
            "token_embed",
            self._rng.normal(0.0, 1.0, (cfg.vocab_size, d)),
            trainable=not cfg.freeze_token_embeddings,
        )
        self._add("segment_embed", self._rng.normal(0.0, 1.0, (cfg.max_targets_per_sample + 1, d)))

        for i in range(cfg.n_decoder_layers):
            self._norm(f"decoder.{i}.norm1")
            self._attention_params(f"decoder.{i}.self_attn")
            self._norm(f"decoder.{i}.norm2")
            self._attention_params(f"decoder.{i}.target_attn")
            self._norm(f"decoder.{i}.norm3")
            self._ffn_params(f"decoder.{i}.ffn")
        self._norm("decoder.norm")

        self._linear("box_head.0", d, d)
        self._linear("box_head.1", d, d)
        self._linear("box_head.2", d, 4)
        self._linear("class_head", d, cfg.n_classes + 1)
        self._linear("index_head", d, cfg.max_targets_per_sample + 1)

    def parameters(self, trainable_only: bool = False) -> Dict[str, Tensor]:
        if not trainable_only:
            return dict(self.params)
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_token_vectors(self, vectors: Dict[int, np.ndarray]) -> int:
        """Overwrite token-embedding rows with external vectors; returns rows replaced."""
        table = self.params["token_embed"].data
        for token_id, vector in vectors.items():
            if vector.shape != (self.cfg.d_model,):
                raise DimensionError(
                    f"word vector of width {vector.shape} does not match d_model {self.cfg.d_model}"
                )
            table[token_id] = vector
        return len(vectors)

    # -- building blocks ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _apply_linear(self, name: str, x: Tensor) -> Tensor:
        return add(matmul(x, self._p(f"{name}.weight")), self._p(f"{name}.bias"))

    def _apply_norm(self, name: str, x: Tensor) -> Tensor:
        return layer_norm(x, self._p(f"{name}.gain"), self._p(f"{name}.bias"))

    def _apply_ffn(self, name: str, x: Tensor) -> Tensor:
        return self._apply_linear(f"{name}.1", relu(self._apply_linear(f"{name}.0", x)))

    def _attend(
        self,
        name: str,
        queries: Tensor,
        keys: Tensor,
        values: Tensor,
        mask: Optional[np.ndarray] = None,
    ) -> Tuple[Tensor, np.ndarray]:
        """Multi-head scaled dot-product attention; ``mask`` is True where blocked."""
        n_heads = self.cfg.n_heads
        head_dim = self.cfg.d_model // n_heads
        q = self._apply_linear(f"{name}.q", queries)
        k = self._apply_linear(f"{name}.k", keys)
        v = self._apply_linear(f"{name}.v", values)

        outputs = []
        weights = []
        for h in range(n_heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            scores = scale(
                matmul(narrow(q, 1, lo, hi), transpose(narrow(k, 1, lo, hi))),
                1.0 / math.sqrt(head_dim),
            )
            attn = softmax(scores, axis=-1, mask=mask)
            outputs.append(matmul(attn, narrow(v, 1, lo, hi)))
            weights.append(attn.data)
        merged = concat(outputs, axis=1) if n_heads > 1 else outputs[0]
        return self._apply_linear(f"{name}.o", merged), np.stack(weights)

    # -- pipeline ---------------------------------------------------------------

    def extract_features(self, image: np.ndarray) -> Tensor:
        """Project each patch of an H x W x 3 image to d_model; no positions added."""
        size = self.cfg.image_size
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (size, size, 3):
            raise DimensionError(f"expected a {size}x{size}x3 image, got {image.shape}")
        return self._apply_linear("patch", constant(patchify(image, self.cfg.patch_size)))

    def positional(self) -> np.ndarray:
        return self._pos

    def encode(self, x: Tensor) -> Tensor:
        """Pre-norm self-attention + FFN layers with residuals; shape preserved."""
        for i in range(self.cfg.n_encoder_layers):
            normed = self._apply_norm(f"encoder.{i}.norm1", x)
            attended, _ = self._attend(f"encoder.{i}.attn", normed, normed, normed)
            x = add(x, attended)
            x = add(x, self._apply_ffn(f"encoder.{i}.ffn", self._apply_norm(f"encoder.{i}.norm2", x)))
        return x

    def build_queries(self, tokens: TokenSequence) -> Tuple[Tensor, Tensor]:
        """
        Object queries are a zero placeholder plus query-embedding rows 0..N-1.
        Target queries are token + segment embeddings plus the shared
        query-embedding rows N..N+K-1.
        """
        cfg = self.cfg
        n, k = cfg.n_object_queries, len(tokens)
        if k != cfg.n_target_queries:
            raise DimensionError(f"token sequence has {k} positions, model expects {cfg.n_target_queries}")
        placeholder = constant(np.zeros((n, cfg.d_model)))
        object_queries = add(placeholder, embedding_lookup(self._p("query_embed"), np.arange(n)))
        target_queries = add(
            add(
                embedding_lookup(self._p("token_embed"), tokens.token_ids),
                embedding_lookup(self._p("segment_embed"), tokens.segment_ids),
            ),
            embedding_lookup(self._p("query_embed"), np.arange(n, n + k)),
        )
        return object_queries, target_queries

    def decode(
        self,
        memory: Tensor,
        object_queries: Tensor,
        target_queries: Tensor,
        pad_mask,
        memory_pos: Optional[np.ndarray] = None,
        block_text: bool = False,
        capture: Optional[List[LayerAttention]] = None,
    ) -> Tensor:
        """
        Run the conditional decoder and return the N object-query states.

        Each layer: (a) joint self-attention over object and target rows with
        padded target positions masked as keys; (b) target-attention into
        ``memory`` issued by object rows only, target rows passing through;
        (c) FFN on all rows. ``block_text`` additionally masks object rows from
        attending to any target row.
        """
        n = object_queries.shape[0]
        k = target_queries.shape[0]
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != (k,):
            raise DimensionError(f"pad mask of shape {pad_mask.shape} does not cover {k} target rows")
        if object_queries.shape[1] != memory.shape[1] or target_queries.shape[1] != memory.shape[1]:
            raise DimensionError("query and memory widths differ")

        self_mask = np.zeros((n + k, n + k), dtype=bool)
        self_mask[:, n:] = pad_mask[None, :]
        if block_text:
            self_mask[:n, n:] = True
        keys = memory if memory_pos is None else add(memory, constant(memory_pos))

        x = concat([object_queries, target_queries], axis=0)
        for i in range(self.cfg.n_decoder_layers):
            prefix = f"decoder.{i}"
            normed = self._apply_norm(f"{prefix}.norm1", x)
            attended, self_weights = self._attend(
                f"{prefix}.self_attn", normed, normed, normed, mask=self_mask
            )
            x = add(x, attended)

            objects = narrow(x, 0, 0, n)
            targets = narrow(x, 0, n, n + k)
            targets_before = x.data[n : n + k].copy()
            attended, target_weights = self._attend(
                f"{prefix}.target_attn", self._apply_norm(f"{prefix}.norm2", objects), keys, memory
            )
            objects = add(objects, attended)

            x = concat([objects, targets], axis=0)
            targets_after = narrow(x, 0, n, n + k).data.copy()
            x = add(x, self._apply_ffn(f"{prefix}.ffn", self._apply_norm(f"{prefix}.norm3", x)))
            if capture is not None:
                capture.append(
                    LayerAttention(
                        target_attention=target_weights,
                        self_attention=self_weights,
                        target_rows_before=targets_before,
                        target_rows_after=targets_after,
                    )
                )
        return self._apply_norm("decoder.norm", narrow(x, 0, 0, n))

    def predict_heads(self, states: Tensor) -> DetectionSet:
        """Shared heads: sigmoid 3-layer MLP for boxes, linear class and target-index logits."""
        hidden = relu(self._apply_linear("box_head.0", states))
        hidden = relu(self._apply_linear("box_head.1", hidden))
        boxes = sigmoid(self._apply_linear("box_head.2", hidden))
        return DetectionSet(
            boxes=boxes,
            class_logits=self._apply_linear("class_head", states),
            target_index_logits=self._apply_linear("index_head", states),
        )

    def forward(
        self,
        image: np.ndarray,
        tokens: TokenSequence,
        capture_attention: bool = False,
        block_text: bool = False,
    ) -> DetectionSet:
        features = self.extract_features(image)
        memory = self.encode(add(features, constant(self._pos)))
        object_queries, target_queries = self.build_queries(tokens)
        capture: Optional[List[LayerAttention]] = [] if capture_attention else None
        states = self.decode(
            memory,
            object_queries,
            target_queries,
            tokens.pad_mask,
            memory_pos=self._pos,
            block_text=block_text,
            capture=capture,
        )
        detections = self.predict_heads(states)
        detections.attention = capture
        return detections

"""
Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active ``GradientTape`` when at
least one input requires a gradient. Outside a tape every operation is a plain
forward computation, which is how evaluation runs.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from targeted_detector.errors import (
    DimensionError,
    NonFiniteError,
    TapeError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Turn the per-operation NaN/Inf assertion on or off."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """
    A dense row-major array of 64-bit floats.

    ``grad`` is populated by ``GradientTape.backward`` and has the same shape
    as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(
        self,
        data: Union[np.ndarray, Sequence, float],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Record:
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


_tape_stack: List["GradientTape"] = []


class GradientTape:
    """
    Ordered record of differentiable operations.

    Records are appended as operations execute, so every record's inputs were
    produced before it. A tape supports exactly one backward pass.

    Usage::

        with GradientTape() as tape:
            loss = reduce_sum(mul(x, x))
        tape.backward(loss)
    """

    def __init__(self) -> None:
        self._records: List[_Record] = []
        self._closed = False

    def __enter__(self) -> "GradientTape":
        if self._closed:
            raise TapeError("cannot re-enter a tape after its backward pass")
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def closed(self) -> bool:
        return self._closed

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, rule: BackwardRule) -> None:
        if self._closed:
            raise TapeError("tape is closed; no further operations can be recorded")
        self._records.append(_Record(inputs, output, rule))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor that requires one and reaches ``loss``."""
        if self._closed:
            raise TapeError("backward already ran on this tape")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._closed = True

        pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: Dict[int, Tensor] = {id(loss): loss}

        for rec in reversed(self._records):
            grad_out = pending.pop(id(rec.output), None)
            if grad_out is None:
                continue
            _accumulate(rec.output, grad_out)
            for inp, grad_in in zip(rec.inputs, rec.backward(grad_out)):
                if grad_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                tensors[key] = inp
                if key in pending:
                    pending[key] = pending[key] + grad_in
                else:
                    pending[key] = grad_in

        # Whatever is left was never produced on this tape: leaves.
        for key, grad in pending.items():
            _accumulate(tensors[key], grad)
        logger.debug("backward pass over %d records", len(self._records))


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def backward(loss: Tensor, tape: Optional[GradientTape] = None) -> None:
    """Run the backward pass of ``tape`` (default: the innermost active tape)."""
    if tape is None:
        if not _tape_stack:
            raise TapeError("no active tape to run backward on")
        tape = _tape_stack[-1]
    tape.backward(loss)


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], rule: BackwardRule) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {rule.__qualname__}")
    tape = _tape_stack[-1] if _tape_stack else None
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(inputs, out, rule)
    return out


def constant(data: Union[np.ndarray, Sequence, float]) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data: Union[np.ndarray, Sequence, float], name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m x k] @ [k x n] -> [m x n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray):
        return g @ b_data.T, a_data.T @ g

    return _emit(a_data @ b_data, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")

    def rule(g: np.ndarray):
        return (g.T,)

    return _emit(x.data.T, (x,), rule)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last dimension."""
    if a.shape == b.shape:
        def rule(g: np.ndarray):
            return g, g

        return _emit(a.data + b.data, (a, b), rule)

    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead_axes = tuple(range(a.ndim - 1))

        def bias_rule(g: np.ndarray):
            return g, g.sum(axis=lead_axes)

        return _emit(a.data + b.data, (a, b), bias_rule)

    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise DimensionError("add_n needs at least one tensor")
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return total


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")

    def rule(g: np.ndarray):
        return g, -g

    return _emit(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g: np.ndarray):
        return g * b_data, g * a_data

    return _emit(a_data * b_data, (a, b), rule)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def rule(g: np.ndarray):
        return (g * factor,)

    return _emit(x.data * factor, (x,), rule)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def rule(g: np.ndarray):
        return (g * positive,)

    return _emit(np.where(positive, x.data, 0.0), (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def rule(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _emit(out, (x,), rule)


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape

    def rule(g: np.ndarray):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum()), (x,), rule)


# ---------------------------------------------------------------------------
# Structural
# ---------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        other = tuple(s for i, s in enumerate(t.shape) if i != axis)
        first = tuple(s for i, s in enumerate(tensors[0].shape) if i != axis)
        if t.ndim != ndim or other != first:
            raise DimensionError(
                f"concat shapes {[tuple(t.shape) for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), rule)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along ``axis``."""
    axis = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"slice {start}:{stop} out of range for axis of size {x.shape[axis]}")
    index = tuple(slice(start, stop) if i == axis else slice(None) for i in range(x.ndim))
    shape = x.shape

    def rule(g: np.ndarray):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(x.data[index], (x,), rule)


def embedding_lookup(table: Tensor, ids: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Gather rows of a 2-D table."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"lookup table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        raise VocabularyError(f"lookup index {int(bad[0])} outside table of {table.shape[0]} rows")
    shape = table.shape

    def rule(g: np.ndarray):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit(table.data[ids], (table,), rule)


# ---------------------------------------------------------------------------
# Normalization and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Max-subtracted softmax along ``axis``.

    ``mask`` (broadcastable to ``x``) marks blocked entries; their output is
    exactly zero. A slice with every entry blocked yields zeros.
    """
    data = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        data = np.where(mask, -np.inf, data)
    peak = np.max(data, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    exp = np.exp(data - peak)
    total = exp.sum(axis=axis, keepdims=True)
    out = np.divide(exp, total, out=np.zeros_like(exp), where=total > 0)

    def rule(g: np.ndarray):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _emit(out, (x,), rule)


def softmax_array(data: np.ndarray, axis: int = -1) -> np.ndarray:
    """Untracked softmax over a plain array."""
    shifted = data - np.max(data, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean, unit variance, then apply gain and bias."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm gain {gain.shape} / bias {bias.shape} do not match width {width}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    gain_data = gain.data
    lead_axes = tuple(range(x.ndim - 1))

    def rule(g: np.ndarray):
        g_normed = g * gain_data
        g_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return g_x, (g * normed).sum(axis=lead_axes), g.sum(axis=lead_axes)

    return _emit(normed * gain_data + bias.data, (x, gain, bias), rule)


def cross_entropy(
    logits: Tensor,
    targets: Union[np.ndarray, Sequence[int]],
    weights: Optional[Union[np.ndarray, Sequence[float]]] = None,
) -> Tensor:
    """
    Weighted mean cross-entropy of ``logits`` [n x C] against integer targets.

    The reduction is ``sum(w_i * ce_i) / sum(w_i)``; without weights it is the
    plain mean.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs [n x C] logits, got {logits.shape}")
    n, n_classes = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= n_classes):
        raise VocabularyError(f"target class outside [0, {n_classes})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total_weight = w.sum()
    if total_weight <= 0:
        raise DimensionError("cross_entropy weights must have a positive sum")

    peak = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - peak
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    per_row = -log_probs[rows, targets]
    value = np.asarray((w * per_row).sum() / total_weight)

    def rule(g: np.ndarray):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * (w / total_weight)[:, None] * float(g),)

    return _emit(value, (logits,), rule)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences."""
    if a.shape != b.shape:
        raise DimensionError(f"l1 shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    sign = np.sign(diff)

    def rule(g: np.ndarray):
        return sign * float(g), -sign * float(g)

    return _emit(np.asarray(np.abs(diff).sum()), (a, b), rule)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """
    Central finite-difference gradient of the scalar ``fn()`` with respect to ``target``.

    ``target.data`` is perturbed in place and restored afterwards.
    """
    grad = np.zeros_like(target.data)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad

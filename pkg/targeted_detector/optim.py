"""
AdamW with decoupled weight decay.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from targeted_detector.errors import DimensionError, OptimizerError
from targeted_detector.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamWState:
    """Moment buffers and hyperparameters for one optimizer."""

    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], state: AdamWState) -> None:
    """
    Apply one AdamW update to every tensor in ``params`` using its ``grad``.

    Raises:
        OptimizerError: a parameter has no gradient.
        DimensionError: a moment buffer does not match its parameter.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise OptimizerError(f"no gradient for parameters: {', '.join(sorted(missing))}")

    state.step += 1
    beta1, beta2 = state.betas
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step

    for name, p in params.items():
        m = state.exp_avg.setdefault(name, np.zeros_like(p.data))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"moment buffers for {name} do not match shape {p.shape}")
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)


class AdamW:
    """Optimizer over a named parameter set."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        *,
        lr: float = 1e-4,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ) -> None:
        self.params = params
        self.state = AdamWState(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def moments(self) -> Dict[str, np.ndarray]:
        """Flat view of the moment buffers, keyed for checkpointing."""
        flat: Dict[str, np.ndarray] = {}
        for name in self.params:
            if name in self.state.exp_avg:
                flat[f"optim.m.{name}"] = self.state.exp_avg[name]
                flat[f"optim.v.{name}"] = self.state.exp_avg_sq[name]
        return flat

    def load_moments(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for name, p in self.params.items():
            m = arrays.get(f"optim.m.{name}")
            v = arrays.get(f"optim.v.{name}")
            if m is None or v is None:
                continue
            if m.shape != p.shape or v.shape != p.shape:
                raise DimensionError(f"stored moments for {name} do not match shape {p.shape}")
            self.state.exp_avg[name] = m.copy()
            self.state.exp_avg_sq[name] = v.copy()
        self.state.step = step
        logger.debug("restored optimizer moments at step %d", step)

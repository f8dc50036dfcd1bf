"""Trainable parameters and the decoupled-weight-decay Adam update."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ShapeError

__all__ = ["Parameter", "adamw_step", "DEFAULT_LR", "DEFAULT_BETA1", "DEFAULT_BETA2", "DEFAULT_WEIGHT_DECAY", "DEFAULT_EPS"]

DEFAULT_LR = 0.00024
DEFAULT_BETA1 = 0.85
DEFAULT_BETA2 = 0.91
DEFAULT_WEIGHT_DECAY = 0.003
DEFAULT_EPS = 1e-8


class Parameter:
    """A named trainable tensor with its optimizer state.

    ``tensor`` is the leaf the graph differentiates into; ``m`` and ``v``
    are the first and second moment accumulators, zero until the first
    step, and always shaped like the value.
    """

    __slots__ = ("name", "tensor", "m", "v", "step")

    def __init__(self, name: str, value: np.ndarray):
        self.name = str(name)
        self.tensor = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)
        self.step = 0

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @value.setter
    def value(self, new: np.ndarray) -> None:
        new = np.asarray(new, dtype=np.float64)
        if new.shape != self.tensor.data.shape:
            raise ShapeError(f"parameter {self.name}: cannot assign shape {new.shape} over {self.tensor.data.shape}")
        self.tensor.data = new

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:  # pragma: no cover
        return f"Parameter({self.name!r}, shape={self.tensor.data.shape}, step={self.step})"


def adamw_step(
    p: Parameter,
    lr: float = DEFAULT_LR,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    weight_decay: float = DEFAULT_WEIGHT_DECAY,
    eps: float = DEFAULT_EPS,
) -> Parameter:
    """One in-place AdamW update on ``p`` from its populated gradient.

    Weight decay is decoupled: it scales the value directly instead of
    entering the moment estimates.  Moments get the usual bias correction,
    and eps sits outside the square root.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    g = p.tensor.grad
    if g is None:
        g = np.zeros_like(p.tensor.data)
    if g.shape != p.tensor.data.shape:
        raise ShapeError(f"parameter {p.name}: grad shape {g.shape} does not match value shape {p.tensor.data.shape}")
    p.step += 1
    p.m = beta1 * p.m + (1.0 - beta1) * g
    p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
    m_hat = p.m / (1.0 - beta1**p.step)
    v_hat = p.v / (1.0 - beta2**p.step)
    p.tensor.data = p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.tensor.data
    return p

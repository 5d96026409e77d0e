"""Named parameters, He initialization and the Adam update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autograd import DTYPE, Tensor

log = logging.getLogger(__name__)


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.tensor.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def he_init(shape: tuple[int, ...], fan_in: int, rng_seed) -> Tensor:
    """Zero-mean normal draws with std sqrt(2 / fan_in)."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    rng = np.random.default_rng(rng_seed)
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(DTYPE))


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> int:
    """Apply one bias-corrected Adam update in place and clear the gradients.

    Returns the number of parameters skipped because they had no gradient.
    """
    skipped = 0
    for p in params:
        g = p.tensor.grad
        if g is None:
            skipped += 1
            continue
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        mhat = p.adam_m / (1.0 - beta1**t)
        vhat = p.adam_v / (1.0 - beta2**t)
        p.tensor.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(DTYPE)
        p.tensor.grad = None
    if skipped:
        log.warning("adam_step skipped %d parameter(s) without gradient", skipped)
    return skipped

"""Central finite-difference gradient checking for tape operations."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tape, Tensor, backward, mul, tsum


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3,
                    seed: int = 0, max_coords: int = 48) -> list[float]:
    """Compare tape gradients of ``sum(fn(*inputs) * R)`` against central differences.

    ``R`` is a fixed random projection so every output element contributes. Only inputs
    with ``requires_grad`` are checked; for large inputs a random subset of at most
    ``max_coords`` coordinates is probed. Returns one relative error per checked input,
    measured as ||analytic - numeric|| / ||numeric|| over the probed coordinates.
    """
    rng = np.random.default_rng(seed)
    with Tape():
        probe = fn(*inputs)
    weights = rng.uniform(0.5, 1.5, size=probe.shape) * rng.choice([-1.0, 1.0], size=probe.shape)
    r = Tensor(weights)

    for t in inputs:
        t.grad = None
    with Tape():
        loss = tsum(mul(fn(*inputs), r))
    backward(loss)

    def objective() -> float:
        out = fn(*inputs).data.astype(np.float64)
        return float((out * weights).sum())

    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        # an input the output does not depend on gets no gradient at all
        grad = np.zeros(t.shape) if t.grad is None else t.grad
        analytic = grad.reshape(-1).astype(np.float64)
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(len(coords))
        for i, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            up = objective()
            flat[c] = orig - h
            down = objective()
            flat[c] = orig
            numeric[i] = (up - down) / (2 * h)
        diff = np.linalg.norm(analytic[coords] - numeric)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic[coords]), 1e-12)
        errors.append(float(diff / scale))
    return errors

"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place one entry at a time."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f()
        flat[i] = keep - h
        down = f()
        flat[i] = keep
        out[i] = (up - down) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
                    weights: np.ndarray | None = None) -> list[float]:
    """Relative error of the backward gradient of ``fn(*tensors)`` for each input.

    Non-scalar outputs are reduced with fixed random ``weights`` so every output
    entry contributes to the checked scalar.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    if weights is None:
        weights = np.random.default_rng(12345).normal(size=probe.shape)

    def scalar(*tensors) -> Tensor:
        out = fn(*tensors)
        return (out * Tensor(weights)).sum() if out.shape else out

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    scalar(*tensors).backward()
    errors = []
    for k, t in enumerate(tensors):
        def f():
            return scalar(*[Tensor(a) for a in arrays]).item()
        num = numeric_grad(f, arrays[k], h)
        ana = t.grad if t.grad is not None else np.zeros_like(arrays[k])
        errors.append(rel_error(ana, num))
    return errors

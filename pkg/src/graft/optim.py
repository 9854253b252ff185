"""AdamW with decoupled weight decay, frozen-parameter skipping and mask enforcement."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


def adamw_update(w, g, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """One AdamW update on raw arrays, in place. ``step`` counts from 1."""
    b1, b2 = betas
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    if weight_decay:
        w -= lr * weight_decay * w
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        active = [p for p in self.params if not p.frozen and p.grad is not None]
        scale = 1.0
        if self.clip_norm is not None and active:
            total = np.sqrt(sum(float(np.sum(p.grad**2)) for p in active))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for p in active:
            g = p.grad * scale if scale != 1.0 else p.grad
            if p.mask is not None:
                g = g * p.mask
            adamw_update(p.data, g, self.m[p.name], self.v[p.name], self.step_count, lr,
                         self.betas, self.eps, self.weight_decay)
            p.apply_mask()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr in self.m.items():
            out[f"opt.m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt.v.{name}"] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name][...] = arrays[f"opt.m.{name}"]
            self.v[name][...] = arrays[f"opt.v.{name}"]
        self.step_count = step_count

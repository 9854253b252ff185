"""Parameters, modules and the transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised for invalid model, data or training configuration."""


class Parameter(Tensor):
    """A trainable tensor with a dotted name, a frozen flag and an optional pruning mask.

    Frozen parameters are left out of the autodiff graph, so no gradient is
    computed for them and the optimizer never touches them.
    """

    __slots__ = ("name", "frozen", "mask")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = False
        self.mask: np.ndarray | None = None

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self.frozen = not value

    def set_mask(self, mask: np.ndarray | None) -> None:
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != self.data.shape:
                raise T.ShapeError(f"mask shape {mask.shape} != parameter shape {self.data.shape}")
            self.data[~mask] = 0.0
        self.mask = mask

    def apply_mask(self) -> None:
        if self.mask is not None:
            self.data[~self.mask] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform Xavier/Glorot samples in [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ConfigError("xavier_init needs at least one dimension")
    fan_in, fan_out = _fans(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


class Module:
    """Minimal container: attributes that are Parameters, Modules or lists of Modules form the tree."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{path}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if key.startswith("running_") and isinstance(value, np.ndarray):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_init((n_in, n_out), rng))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def batch_norm_1d(
    x: Tensor,
    gain: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Bias-free batch normalization over axis 0 of a (B, D) tensor.

    In training mode the running statistics are updated in place by an
    exponential moving average (unbiased variance, as in PyTorch).
    """
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        return T._result(
            xhat * gain.data,
            (x, gain),
            lambda g: (g * gain.data * inv, (g * xhat).sum(axis=0)),
        )
    b = x.shape[0]
    if b < 2:
        raise ConfigError(f"batch norm in train mode needs batch size >= 2, got {b}")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc**2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * b / (b - 1)

    def bw(g):
        ggain = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return gx, ggain

    return T._result(xhat * gain.data, (x, gain), bw)


class BatchNorm1d(Module):
    """Batch norm with a gain but no bias parameter."""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm_1d(
            x, self.gain, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


def multi_head_attention(
    x: Tensor,
    attn: "MultiHeadAttention",
    n_heads: int,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention over the full sequence of ``x`` (..., L, D)."""
    d = x.shape[-1]
    if d % n_heads:
        raise ConfigError(f"embed dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = x.shape[:-2]
    seq = x.shape[-2]

    def heads(t: Tensor) -> Tensor:
        t = t.reshape(*lead, seq, n_heads, dh)
        return T.swapaxes(t, -2, -3)

    q = heads(T.linear(x, attn.q, attn.bq))
    k = heads(T.linear(x, attn.k, attn.bk))
    v = heads(T.linear(x, attn.v, attn.bv))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1)
    weights = T.dropout(weights, attn.dropout, rng, training)
    ctx = T.swapaxes(T.matmul(weights, v), -2, -3).reshape(*lead, seq, d)
    return T.linear(ctx, attn.o, attn.bo)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if dim % n_heads:
            raise ConfigError(f"embed dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.dropout = dropout
        self.q = Parameter(xavier_init((dim, dim), rng))
        self.k = Parameter(xavier_init((dim, dim), rng))
        self.v = Parameter(xavier_init((dim, dim), rng))
        self.o = Parameter(xavier_init((dim, dim), rng))
        self.bq = Parameter(np.zeros(dim))
        self.bk = Parameter(np.zeros(dim))
        self.bv = Parameter(np.zeros(dim))
        self.bo = Parameter(np.zeros(dim))
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return multi_head_attention(x, self, self.n_heads, self._rng, self.training)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer encoder layer: x + MHA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator, mlp_ratio: int = 4, dropout: float = 0.0):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dropout)
        self.ln2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))

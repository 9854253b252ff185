"""Soft-margin triplet, center and label-smoothed cross-entropy losses, and the
fusion/data token selection used to build augmented triplets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .nn import ConfigError, Module, Parameter, xavier_init
from .tensor import Tensor

FUSION = "F"
DATA = "D"


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.0005
    gamma: float = 0.5

    def validate(self) -> "LossWeights":
        for key in ("alpha", "beta", "gamma"):
            if getattr(self, key) < 0:
                raise ConfigError(f"loss weight {key} must be >= 0")
        return self


@dataclass(frozen=True)
class TripletScheme:
    """Token source for anchor, positive and negative: "F" (fused token) or "D" (data token)."""

    anchor: str = FUSION
    positive: str = FUSION
    negative: str = DATA
    data_token_index: int = 0

    @classmethod
    def parse(cls, code: str, data_token_index: int = 0) -> "TripletScheme":
        code = code.upper()
        if len(code) != 3 or set(code) - {FUSION, DATA}:
            raise ConfigError(f"triplet scheme must be three letters from F/D, got {code!r}")
        return cls(code[0], code[1], code[2], data_token_index)

    @property
    def code(self) -> str:
        return self.anchor + self.positive + self.negative

    @property
    def uses_data(self) -> bool:
        return DATA in self.code


ALL_SCHEMES = ("FFD", "DDD", "FFF", "FDD", "DFF", "DFD", "DDF", "FDF")


class Centroids(Module):
    """One learnable centre per identity class."""

    def __init__(self, n_classes: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(xavier_init((n_classes, dim), rng), name="centroids.table")


def soft_margin_triplet(f_a: Tensor, f_p: Tensor, f_n: Tensor) -> Tensor:
    """Batch mean of softplus(|f_a - f_p|^2 - |f_a - f_n|^2)."""
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise T.ShapeError(f"triplet shapes differ: {f_a.shape}, {f_p.shape}, {f_n.shape}")
    d_ap = T.sum_((f_a - f_p) ** 2, axis=-1)
    d_an = T.sum_((f_a - f_n) ** 2, axis=-1)
    return T.mean(T.softplus(d_ap - d_an))


def center_loss(f_a: Tensor, labels, centroids: Tensor, metric: str = "euclidean") -> Tensor:
    """Sum over the batch of the distance between each embedding and its class centre."""
    labels = np.asarray(labels, dtype=np.intp)
    k = centroids.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"center_loss label out of range [0, {k}): {labels.tolist()}")
    c = T.take_rows(centroids, labels)
    if metric == "euclidean":
        return T.sum_(T.safe_norm(f_a - c, axis=-1))
    if metric == "cosine":
        dots = T.sum_(f_a * c, axis=-1)
        cos = dots / (T.safe_norm(f_a, axis=-1) * T.safe_norm(c, axis=-1))
        return T.sum_(1.0 - cos)
    raise ConfigError(f"center metric must be 'euclidean' or 'cosine', got {metric!r}")


def cross_entropy_label_smoothing(logits: Tensor, labels, eps: float = 0.0) -> Tensor:
    """Mean cross-entropy against targets with 1-eps on the true class and eps/(K-1) elsewhere."""
    b, k = logits.shape
    if k < 2:
        raise ConfigError("cross entropy needs at least two classes")
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {eps}")
    labels = np.asarray(labels, dtype=np.intp)
    q = np.full((b, k), eps / (k - 1))
    q[np.arange(b), labels] = 1.0 - eps
    logp = T.log_softmax(logits, axis=-1)
    return T.mean(T.sum_(logp * (-q), axis=-1))


def data_token_source(data_tokens: Sequence[Tensor], index: int, n_tokens: int = 1) -> Tensor:
    """Mean over modalities of ``n_tokens`` consecutive data tokens starting at ``index``, flattened."""
    n_data = data_tokens[0].shape[1]
    if index < 0 or index + n_tokens > n_data:
        raise ConfigError(f"data token index {index} (+{n_tokens}) out of range for {n_data} data tokens")
    picked = [T.getslice(z, (slice(None), slice(index, index + n_tokens), slice(None))) for z in data_tokens]
    b = picked[0].shape[0]
    avg = picked[0] if len(picked) == 1 else T.mean(T.stack(picked, axis=0), axis=0)
    return avg.reshape(b, n_tokens * data_tokens[0].shape[2])


def select_triplet_embeddings(
    scheme: TripletScheme,
    fused: Tensor,
    data_tokens: Sequence[Tensor],
    anchor_idx=None,
    positive_idx=None,
    negative_idx=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Pick anchor, positive and negative embeddings according to ``scheme``.

    Without index arrays the batch is read as three equal consecutive blocks
    (anchors, positives, negatives). A data source draws as many consecutive
    data tokens as there are fusion tokens so its width matches the fused
    embedding.
    """
    n = fused.shape[0]
    if anchor_idx is None:
        if n % 3:
            raise T.ShapeError(f"batch of {n} cannot be split into anchor/positive/negative blocks")
        b = n // 3
        anchor_idx, positive_idx, negative_idx = np.arange(b), np.arange(b, 2 * b), np.arange(2 * b, 3 * b)
    n_tokens = max(1, fused.shape[1] // data_tokens[0].shape[2]) if data_tokens else 1
    data_src = None
    if scheme.uses_data:
        data_src = data_token_source(data_tokens, scheme.data_token_index, n_tokens)
        if data_src.shape[1] != fused.shape[1]:
            raise T.ShapeError(f"data source width {data_src.shape[1]} != fused width {fused.shape[1]}")

    def pick(src: str, idx) -> Tensor:
        return T.take_rows(fused if src == FUSION else data_src, idx)

    return pick(scheme.anchor, anchor_idx), pick(scheme.positive, positive_idx), pick(scheme.negative, negative_idx)


class LossBreakdown(NamedTuple):
    total: Tensor
    triplet: float
    center: float
    ce: float


def total_loss(triplet: Tensor, center: Tensor, ce: Tensor, weights: LossWeights) -> LossBreakdown:
    """Weighted sum alpha*triplet + beta*center + gamma*ce, with unweighted components for logging."""
    total = triplet * weights.alpha + center * weights.beta + ce * weights.gamma
    return LossBreakdown(total, triplet.item(), center.item(), ce.item())

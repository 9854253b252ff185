"""Retrieval evaluation: embeddings, distances, rankings, CMC and mAP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DatasetSplit, MultimodalSample, stack_modalities
from .nn import ConfigError


@dataclass
class EmbeddingSet:
    ids: np.ndarray
    views: np.ndarray
    vectors: np.ndarray


@dataclass
class RankingResult:
    """Per query: gallery indices by ascending distance, relevance flags in that order,
    and which gallery items were excluded for that query (all-False by default)."""

    order: np.ndarray
    relevant: np.ndarray
    excluded: np.ndarray


def embed_dataset(model, samples: Sequence[MultimodalSample], batch_size: int = 64) -> EmbeddingSet:
    """Pre-BN fused embeddings in inference mode, without augmentation."""
    chunks = []
    for start in range(0, len(samples), batch_size):
        chunks.append(model.embed(stack_modalities(samples[start:start + batch_size])))
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.embed_out_dim))
    if not np.all(np.isfinite(vectors)):
        raise FloatingPointError("non-finite embedding")
    return EmbeddingSet(np.array([s.id for s in samples]), np.array([s.view for s in samples]), vectors)


def pairwise_distances(q: np.ndarray, g: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding widths differ: {q.shape[1]} vs {g.shape[1]}")
    if metric == "euclidean":
        sq = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            raise ValueError("cosine distance is undefined for a zero vector")
        return 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T
    raise ConfigError(f"metric must be 'euclidean' or 'cosine', got {metric!r}")


def rank_gallery(dist: np.ndarray, q_ids, g_ids, q_views=None, g_views=None,
                 exclude_same_view: bool = False) -> RankingResult:
    """Stable ascending sort of each distance row; ties keep gallery index order."""
    q_ids, g_ids = np.asarray(q_ids), np.asarray(g_ids)
    order = np.argsort(dist, axis=1, kind="stable")
    relevant = g_ids[order] == q_ids[:, None]
    if exclude_same_view:
        if q_views is None or g_views is None:
            raise ValueError("same-view exclusion needs query and gallery views")
        excluded = (np.asarray(g_views)[order] == np.asarray(q_views)[:, None]) & relevant
    else:
        excluded = np.zeros_like(relevant)
    return RankingResult(order, relevant, excluded)


def cmc_and_map(result: RankingResult, ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Rank-k and mAP over queries that have at least one relevant gallery item.

    AP averages precision at each relevant rank. Queries with no relevant item
    are dropped from every metric and counted in ``excluded_queries``.
    """
    hits = {k: [] for k in ks}
    aps = []
    skipped = 0
    for rel, exc in zip(result.relevant, result.excluded):
        r = rel[~exc]
        n_rel = int(r.sum())
        if n_rel == 0:
            skipped += 1
            continue
        ranks = np.flatnonzero(r) + 1
        aps.append(float(np.mean(np.arange(1, n_rel + 1) / ranks)))
        for k in ks:
            hits[k].append(float(ranks[0] <= k))
    out = {f"R{k}": (float(np.mean(hits[k])) if aps else float("nan")) for k in ks}
    out["mAP"] = float(np.mean(aps)) if aps else float("nan")
    out["excluded_queries"] = skipped
    out["n_queries"] = len(aps)
    return out


def expected_random_ap(n_relevant: int, n_gallery: int) -> float:
    """Expected AP of a uniformly random ranking with ``n_relevant`` hits among ``n_gallery`` items.

    A given relevant item lands at rank r with probability 1/N and then has
    (r-1)(R-1)/(N-1) other relevant items above it on average.
    """
    R, N = n_relevant, n_gallery
    if R == 0:
        return float("nan")
    if N == 1:
        return 1.0
    r = np.arange(1, N + 1, dtype=np.float64)
    return float(np.sum((1.0 + (r - 1.0) * (R - 1.0) / (N - 1.0)) / r) / N)


def chance_map(q_ids, g_ids) -> float:
    """mAP expected from random rankings, given only the gallery composition."""
    g_ids = np.asarray(g_ids)
    values = []
    for qid in np.asarray(q_ids):
        n_rel = int(np.sum(g_ids == qid))
        if n_rel:
            values.append(expected_random_ap(n_rel, len(g_ids)))
    return float(np.mean(values))


def evaluate(model, split: DatasetSplit, metric: str = "euclidean", exclude_same_view: bool = False,
             batch_size: int = 64, ks: Sequence[int] = (1, 5, 10)) -> dict:
    q = embed_dataset(model, split.query, batch_size)
    g = embed_dataset(model, split.gallery, batch_size)
    dist = pairwise_distances(q.vectors, g.vectors, metric)
    result = rank_gallery(dist, q.ids, g.ids, q.views, g.views, exclude_same_view)
    metrics = cmc_and_map(result, ks)
    metrics["chance_mAP"] = chance_map(q.ids, g.ids)
    return metrics

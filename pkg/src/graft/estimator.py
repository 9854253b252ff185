"""scikit-learn style wrapper: fit on stacked multimodal arrays, transform to embeddings."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import MultimodalSample
from .evaluate import cmc_and_map, pairwise_distances, rank_gallery
from .losses import TripletScheme
from .model import GraftConfig, GraftModel
from .train import StageConfig, Trainer, label_map_for, new_centroids, warm_start


def check_multimodal_input(X, y=None, views=None):
    """Validate a (n, M, C, H, W) image array and matching labels/views.

    Returns float64 copies; raises ValueError naming the offending argument.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 5:
        raise ValueError(f"X must have shape (n, modalities, channels, height, width), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X has no samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or infinity")
    out = [X]
    for name, arr in (("y", y), ("views", views)):
        if arr is None:
            out.append(None)
            continue
        arr = np.asarray(arr)
        if arr.ndim != 1 or len(arr) != len(X):
            raise ValueError(f"{name} must be 1-D with {len(X)} entries, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"{name} must hold integers, got dtype {arr.dtype}")
        out.append(arr.astype(np.int64))
    return tuple(out)


def to_samples(X, y=None, views=None) -> list[MultimodalSample]:
    n = len(X)
    y = np.zeros(n, np.int64) if y is None else y
    views = np.zeros(n, np.int64) if views is None else views
    return [MultimodalSample(int(y[i]), int(views[i]), i, tuple(X[i])) for i in range(n)]


class GraftReID(BaseEstimator, TransformerMixin):
    """Two-stage gradual-fusion model as a transformer from images to embeddings.

    ``predict`` returns the identity of the nearest training sample and
    ``score`` is retrieval mAP of the given samples against the training set.
    """

    def __init__(self, embed_dim=64, depth=2, heads=4, patch_size=8, n_encoder_layers=1, n_fusion_tokens=1,
                 fusion="graft", scheme="FFD", data_token_index=0, pretrain_epochs=0, stage1_epochs=20,
                 stage2_epochs=10, stage1_lr=1e-3, stage2_lr=5e-6, warmup_steps=10, batch_triplets=26, positives_per_anchor=8,
                 metric="euclidean", seed=0):
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.patch_size = patch_size
        self.n_encoder_layers = n_encoder_layers
        self.n_fusion_tokens = n_fusion_tokens
        self.fusion = fusion
        self.scheme = scheme
        self.data_token_index = data_token_index
        self.pretrain_epochs = pretrain_epochs
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.warmup_steps = warmup_steps
        self.batch_triplets = batch_triplets
        self.positives_per_anchor = positives_per_anchor
        self.metric = metric
        self.seed = seed

    def fit(self, X, y, views=None):
        X, y, views = check_multimodal_input(X, y, views)
        if len(np.unique(y)) < 2:
            raise ValueError("fit needs at least two identities")
        _, m, c, h, w = X.shape
        samples = to_samples(X, y, views)
        self.label_map_ = label_map_for(samples)
        cfg = GraftConfig(n_modalities=m, channels=c, height=h, width=w, patch_size=self.patch_size,
                          embed_dim=self.embed_dim, depth=self.depth, heads=self.heads,
                          encoder_heads=self.heads, n_encoder_layers=self.n_encoder_layers,
                          n_fusion_tokens=self.n_fusion_tokens, n_classes=len(self.label_map_),
                          fusion=self.fusion, seed=self.seed).validate()
        self.model_ = GraftModel(cfg)
        self.centroids_ = new_centroids(cfg)
        scheme = TripletScheme.parse(self.scheme, self.data_token_index)
        warm_start(self.model_, samples, self.pretrain_epochs, seed=self.seed, label_map=self.label_map_)
        common = dict(batch_triplets=self.batch_triplets, positives_per_anchor=self.positives_per_anchor)
        stages = (StageConfig.stage_one(epochs=self.stage1_epochs, base_lr=self.stage1_lr,
                                        warmup_steps=self.warmup_steps, seed=self.seed, **common),
                  StageConfig.stage_two(epochs=self.stage2_epochs, base_lr=self.stage2_lr, seed=self.seed + 1,
                                        **common))
        self.history_ = []
        for stage in stages:
            state = Trainer(self.model_, self.centroids_, samples, stage, scheme, label_map=self.label_map_).run()
            self.history_.extend(state.history)
        self.gallery_ids_ = y
        self.gallery_views_ = views if views is not None else np.zeros(len(y), np.int64)
        self.gallery_embeddings_ = self._embed(X)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _embed(self, X, batch_size=64):
        chunks = [self.model_.embed(list(X[i:i + batch_size].transpose(1, 0, 2, 3, 4)))
                  for i in range(0, len(X), batch_size)]
        return np.concatenate(chunks)

    def _check_shape(self, X):
        cfg = self.model_.cfg
        want = (cfg.n_modalities, cfg.channels, cfg.height, cfg.width)
        if X.shape[1:] != want:
            raise ValueError(f"X has per-sample shape {X.shape[1:]}, fitted on {want}")

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_multimodal_input(X)[0]
        self._check_shape(X)
        return self._embed(X)

    def predict(self, X):
        dist = pairwise_distances(self.transform(X), self.gallery_embeddings_, self.metric)
        return self.gallery_ids_[np.argmin(dist, axis=1)]

    def score(self, X, y, views=None):
        X, y, views = check_multimodal_input(X, y, views)
        dist = pairwise_distances(self.transform(X), self.gallery_embeddings_, self.metric)
        return cmc_and_map(rank_gallery(dist, y, self.gallery_ids_))["mAP"]

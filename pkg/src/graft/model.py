"""Gradual fusion transformer: shared patch embedding and backbone, per-modality
encoders bridged by one learnable fusion token, and a bias-free BNNeck head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .nn import BatchNorm1d, ConfigError, EncoderBlock, Linear, Module, Parameter, xavier_init
from .tensor import Tensor

FUSION_METHODS = ("graft", "vanilla_cls", "vanilla_avg")


@dataclass
class GraftConfig:
    n_modalities: int = 2
    channels: int = 3
    height: int = 32
    width: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    n_encoder_layers: int = 1
    n_fusion_tokens: int = 1
    n_classes: int = 10
    encoder_heads: int = 4
    mlp_ratio: int = 4
    dropout: float = 0.0
    fusion: str = "graft"
    seed: int = 0

    def validate(self) -> "GraftConfig":
        if self.n_modalities < 1:
            raise ConfigError("model.n_modalities must be >= 1")
        if self.patch_size < 1 or self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"model: image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )
        for key in ("heads", "encoder_heads"):
            h = getattr(self, key)
            if h < 1 or self.embed_dim % h:
                raise ConfigError(f"model.embed_dim {self.embed_dim} not divisible by model.{key}={h}")
        if self.n_fusion_tokens < 1:
            raise ConfigError("model.n_fusion_tokens must be >= 1")
        if self.depth < 0 or self.n_encoder_layers < 1:
            raise ConfigError("model.depth must be >= 0 and model.n_encoder_layers >= 1")
        if self.n_classes < 2:
            raise ConfigError("model.n_classes must be >= 2")
        if self.fusion not in FUSION_METHODS:
            raise ConfigError(f"model.fusion must be one of {FUSION_METHODS}, got {self.fusion!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        return self

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def embed_out_dim(self) -> int:
        return self.n_fusion_tokens * self.embed_dim if self.fusion == "graft" else self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W/P^2, P*P*C), patches in row-major order, each flattened as (C, P, P)."""
    n, c, h, w = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    x = images.reshape(n, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // patch) * (w // patch), c * patch * patch)


class PatchEmbed(Module):
    def __init__(self, cfg: GraftConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.proj = Linear(cfg.channels * cfg.patch_size**2, cfg.embed_dim, rng)
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.embed_dim)))

    def forward(self, images: np.ndarray) -> Tensor:
        patches = Tensor(patchify(np.asarray(images, dtype=np.float64), self.patch_size))
        return self.proj(patches) + self.pos


class Backbone(Module):
    """Shape-preserving stack of pre-norm encoder blocks; ``depth=0`` is the identity."""

    def __init__(self, cfg: GraftConfig, rng: np.random.Generator):
        self.blocks = [EncoderBlock(cfg.embed_dim, cfg.heads, rng, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.depth)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class FusionToken(Module):
    def __init__(self, cfg: GraftConfig, rng: np.random.Generator):
        self.tokens = Parameter(xavier_init((cfg.n_fusion_tokens, cfg.embed_dim), rng))


class ModalityEncoder(Module):
    def __init__(self, cfg: GraftConfig, rng: np.random.Generator):
        self.layers = [
            EncoderBlock(cfg.embed_dim, cfg.encoder_heads, rng, cfg.mlp_ratio, cfg.dropout)
            for _ in range(cfg.n_encoder_layers)
        ]


class BNNeckHead(Module):
    """Bias-free batch norm followed by a bias-free classifier."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        self.bn = BatchNorm1d(dim)
        self.fc = Linear(dim, n_classes, rng, bias=False)

    def forward(self, embed: Tensor) -> Tensor:
        return self.fc(self.bn(embed))


def modality_encoder_layer(block: EncoderBlock, fusion_in: Tensor, data_in: Tensor) -> tuple[Tensor, Tensor]:
    """Concatenate fusion tokens ahead of data tokens, run one encoder block, split back."""
    n_fusion = fusion_in.shape[-2]
    n_data = data_in.shape[-2]
    joint = T.concat([fusion_in, data_in], axis=-2)
    out = block(joint)
    z_f, z_d = T.split(out, [n_fusion, n_data], axis=-2)
    return z_f, z_d


def fuse_average(fusion_outputs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of the per-modality fusion outputs.

    Values are sorted along the modality axis before accumulation and the
    mean is formed as ``min + sum(x - min) / M``, so the result does not
    depend on modality order and is exact when all inputs are equal.
    """
    if not fusion_outputs:
        raise ConfigError("fuse_average needs at least one fusion output")
    shape = fusion_outputs[0].shape
    for t in fusion_outputs:
        if t.shape != shape:
            raise T.ShapeError(f"fuse_average shape mismatch: {t.shape} vs {shape}")
    m = len(fusion_outputs)
    if m == 1:
        return fusion_outputs[0]
    stacked = np.sort(np.stack([t.data for t in fusion_outputs]), axis=0)
    low = stacked[0]
    acc = np.zeros_like(low)
    for row in stacked[1:]:
        acc = acc + (row - low)
    out = low + acc / m

    def bw(g):
        share = g / m
        return tuple(share for _ in fusion_outputs)

    return T._result(out, tuple(fusion_outputs), bw)


class GraftOutput(NamedTuple):
    embed: Tensor
    data_tokens: list
    logits: Tensor


class GraftModel(Module):
    def __init__(self, cfg: GraftConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.patch = PatchEmbed(cfg, rng)
        self.backbone = Backbone(cfg, rng)
        if cfg.fusion == "graft":
            self.fusion = FusionToken(cfg, rng)
            self.encoders = [ModalityEncoder(cfg, rng) for _ in range(cfg.n_modalities)]
        else:
            # vanilla baselines: one joint encoder over all modalities' tokens
            self.joint = ModalityEncoder(cfg, rng)
            if cfg.fusion == "vanilla_cls":
                self.cls = Parameter(xavier_init((1, cfg.embed_dim), rng))
        self.head = BNNeckHead(cfg.embed_out_dim, cfg.n_classes, rng)
        self._dropout_rng = np.random.default_rng(cfg.seed + 1)
        for name, p in self.named_parameters():
            p.name = name

    def encode_tokens(self, images: Sequence[np.ndarray]) -> list[Tensor]:
        """Shared patch embedding and backbone; returns one (N, L_d, D) tensor per modality."""
        m = self.cfg.n_modalities
        if len(images) != m:
            raise ConfigError(f"model expects {m} modalities, got {len(images)}")
        sizes = [len(x) for x in images]
        if len(set(sizes)) != 1:
            raise ConfigError(f"modality batches are not aligned: sizes {sizes}")
        stacked = np.concatenate([np.asarray(x, dtype=np.float64) for x in images], axis=0)
        tokens = self.backbone(self.patch(stacked))
        return T.split(tokens, sizes, axis=0)

    def forward(self, images: Sequence[np.ndarray], ablate_fusion: bool = False) -> GraftOutput:
        data = self.encode_tokens(images)
        n = data[0].shape[0]
        if self.cfg.fusion == "graft":
            embed, data = self._gradual_fusion(data, n, ablate_fusion)
        else:
            embed, data = self._vanilla_fusion(data, n)
        logits = self.head(embed)
        return GraftOutput(embed, data, logits)

    def _gradual_fusion(self, data: list[Tensor], n: int, ablate: bool) -> tuple[Tensor, list[Tensor]]:
        cfg = self.cfg
        fused = T.broadcast_to(self.fusion.tokens, (n, cfg.n_fusion_tokens, cfg.embed_dim))
        for layer in range(cfg.n_encoder_layers):
            outs = []
            for i, enc in enumerate(self.encoders):
                z_f, data[i] = modality_encoder_layer(enc.layers[layer], fused, data[i])
                outs.append(z_f)
            fused = fuse_average(outs)
            if ablate:
                fused = fused * 0.0
        return fused.reshape(n, cfg.n_fusion_tokens * cfg.embed_dim), data

    def _vanilla_fusion(self, data: list[Tensor], n: int) -> tuple[Tensor, list[Tensor]]:
        cfg = self.cfg
        parts = list(data)
        if cfg.fusion == "vanilla_cls":
            parts = [T.broadcast_to(self.cls, (n, 1, cfg.embed_dim))] + parts
        seq = T.concat(parts, axis=1)
        for block in self.joint.layers:
            seq = block(seq)
        sizes = [p.shape[1] for p in parts]
        pieces = T.split(seq, sizes, axis=1)
        if cfg.fusion == "vanilla_cls":
            embed = pieces[0].reshape(n, cfg.embed_dim)
            return embed, pieces[1:]
        return T.mean(seq, axis=1), pieces

    def embed(self, images: Sequence[np.ndarray]) -> np.ndarray:
        """Inference-mode retrieval embeddings (pre-BN fused token)."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.forward(images).embed.data.copy()
        finally:
            self.train(was_training)

    def backbone_parameters(self) -> list[Parameter]:
        return self.patch.parameters() + self.backbone.parameters()


def count_parameters(model: Module, by_group: bool = True, nonzero: bool = False, depth: int = 1) -> dict[str, int]:
    """Parameter counts keyed by the first ``depth`` components of each name, plus ``total``.

    With ``nonzero=True`` only entries different from zero are counted.
    """
    table: dict[str, int] = {}
    total = 0
    for name, p in model.named_parameters():
        n = int(np.count_nonzero(p.data)) if nonzero else p.data.size
        total += n
        if by_group:
            key = ".".join(name.split(".")[:depth])
            table[key] = table.get(key, 0) + n
    table["total"] = total
    return table

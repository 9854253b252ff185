"""Named run configurations."""

from __future__ import annotations

from .config import RunConfig, from_dict

NO_FLIPS = {"hflip": 0.0, "vflip": 0.0}

# M=2, D=64, 10 identities: the desk-scale smoke configuration.
TINY = {
    "model": {"embed_dim": 64, "depth": 2, "heads": 4, "encoder_heads": 4, "patch_size": 8},
    "data": {"synthetic": {"n_ids": 10, "samples_per_id": 16, "n_modalities": 2}},
    "pretrain": {"epochs": 20, "lr": 1e-3},
    "stage1": {"epochs": 6, "base_lr": 2e-3, "warmup_steps": 5, "augment": NO_FLIPS},
    "stage2": {"epochs": 1, "augment": NO_FLIPS},
    "loss": {"scheme": "FFD"},
}

# a few seconds end to end; for plumbing tests only
MICRO = {
    "model": {"embed_dim": 16, "depth": 1, "heads": 2, "encoder_heads": 2, "patch_size": 8},
    "data": {"synthetic": {"n_ids": 6, "samples_per_id": 4, "query_per_id": 2, "gallery_per_id": 4,
                           "height": 16, "width": 16}},
    "pretrain": {"epochs": 0},
    "stage1": {"epochs": 2, "base_lr": 1e-3, "warmup_steps": 1, "batch_triplets": 6, "positives_per_anchor": 2,
               "augment": NO_FLIPS},
    "stage2": {"epochs": 1, "batch_triplets": 6, "positives_per_anchor": 2, "augment": NO_FLIPS},
    "prune": {"n_iterations": 2, "finetune_epochs": 1},
    "eval": {"batch_size": 16},
}

PRESETS = {"tiny": TINY, "micro": MICRO}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def preset(name: str, overrides: dict | None = None, seed: int | None = None) -> RunConfig:
    """Resolved ``RunConfig`` for a named preset, with nested ``overrides`` applied."""
    raw = _merge(PRESETS[name], overrides or {})
    cfg = from_dict(RunConfig, raw)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()

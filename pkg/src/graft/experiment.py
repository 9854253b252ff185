"""End-to-end pipeline: load data, build the model, run both stages, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .config import RunConfig, config_hash, from_dict, to_dict
from .data import DatasetSplit, generate_synthetic, load_directory
from .evaluate import evaluate
from .losses import Centroids
from .model import GraftModel
from .nn import ConfigError
from .train import TrainState, Trainer, label_map_for, model_from_checkpoint, new_centroids, warm_start

log = logging.getLogger(__name__)


def load_split(cfg: RunConfig) -> DatasetSplit:
    split = load_directory(cfg.data.path) if cfg.data.path else generate_synthetic(cfg.data.synthetic)
    if cfg.data.modalities:
        split = split.select_modalities(cfg.data.modalities)
    return split


def resolve(cfg: RunConfig, split: DatasetSplit) -> RunConfig:
    """Copy of ``cfg`` whose model section matches the data (modalities, classes, image shape)."""
    out = from_dict(RunConfig, to_dict(cfg))
    c, h, w = split.image_shape
    out.model.n_modalities = split.n_modalities
    out.model.n_classes = len({s.id for s in split.train})
    out.model.channels, out.model.height, out.model.width = c, h, w
    return out.validate()


def build(cfg: RunConfig) -> tuple[GraftModel, Centroids]:
    model = GraftModel(cfg.model)
    return model, new_centroids(cfg.model)


@dataclass
class RunResult:
    config: RunConfig
    metrics: dict
    model: GraftModel
    centroids: Centroids
    states: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)


def evaluate_with(cfg: RunConfig, split: DatasetSplit) -> Callable:
    def fn(model):
        return evaluate(model, split, cfg.eval.metric, cfg.eval.exclude_same_view, cfg.eval.batch_size,
                        tuple(cfg.eval.ks))
    return fn


def train_pipeline(cfg: RunConfig, split: DatasetSplit | None = None, out_dir: str | Path | None = None,
                   stages: str = "both", stage1_checkpoint: str | Path | None = None, from_scratch: bool = False,
                   resume: str | Path | None = None, sink: Callable[[dict], None] | None = None) -> RunResult:
    """Run stage one and/or two and evaluate on query/gallery.

    ``stages="2"`` starts from ``stage1_checkpoint`` unless ``from_scratch``.
    ``resume`` continues a stage from one of its epoch checkpoints.
    """
    if stages not in ("1", "2", "both"):
        raise ConfigError(f"stages must be '1', '2' or 'both', got {stages!r}")
    split = split if split is not None else load_split(cfg)
    cfg = resolve(cfg, split)
    chash = config_hash(cfg)
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir else None
    scheme = cfg.loss.triplet_scheme()
    label_map = label_map_for(split.train)
    meta = {"config_hash": chash}
    stage1 = cfg.stage1
    stage2 = cfg.stage2
    if cfg.loss.center_metric != "euclidean":
        stage1 = _replace(stage1, center_metric=cfg.loss.center_metric)
        stage2 = _replace(stage2, center_metric=cfg.loss.center_metric)

    resume_stage = None
    if resume is not None:
        from .checkpoint import load_checkpoint
        resume_stage = load_checkpoint(resume).meta.get("stage")

    model, centroids = build(cfg)
    result = RunResult(cfg, {}, model, centroids)
    if stages in ("1", "both") and resume_stage != 2:
        if resume is None and cfg.pretrain.epochs > 0:
            warm_start(model, split.train, cfg.pretrain.epochs, cfg.pretrain.lr, cfg.pretrain.batch_size,
                       seed=cfg.seed, label_map=label_map)
        trainer = Trainer(model, centroids, split.train, stage1, scheme, sink, ckpt_dir, label_map, meta)
        if resume is not None:
            trainer.resume(resume)
        result.states.append(trainer.run())
        if ckpt_dir is not None:
            result.checkpoints["stage1"] = str(trainer.save(ckpt_dir / "stage1_final.ckpt"))
    elif stages == "2" and resume_stage is None:
        if stage1_checkpoint is None or not Path(stage1_checkpoint).exists():
            if not from_scratch:
                raise ConfigError(
                    f"stage 2 needs a stage-1 checkpoint; missing input: {stage1_checkpoint or '--stage1-checkpoint'}"
                    " (or pass --from-scratch)")
        else:
            loaded, loaded_centroids, _ = model_from_checkpoint(stage1_checkpoint)
            _copy_weights(loaded, model)
            _copy_weights(loaded_centroids, centroids)
    if stages in ("2", "both"):
        trainer = Trainer(model, centroids, split.train, stage2, scheme, sink, ckpt_dir, label_map, meta)
        if resume is not None and resume_stage == 2:
            restore_from = resume
            trainer.resume(restore_from)
        result.states.append(trainer.run())
        if ckpt_dir is not None:
            result.checkpoints["stage2"] = str(trainer.save(ckpt_dir / "stage2_final.ckpt"))
    result.metrics = evaluate_with(cfg, split)(model)
    return result


def _copy_weights(src, dst) -> None:
    from .checkpoint import load_module_entries, module_entries
    load_module_entries(dst, module_entries(src))


def _replace(obj, **kw):
    from dataclasses import replace
    return replace(obj, **kw)


def last_losses(states: list[TrainState]) -> list[float]:
    return [r["L_total"] for s in states for r in s.history]

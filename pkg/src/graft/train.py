"""Two-stage training: frozen backbone with warmup/sqrt-decay/cooldown, then the
full model at a constant rate with center loss and label smoothing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, Entry, load_checkpoint, load_module_entries, module_entries, save_checkpoint
from .data import AugmentPolicy, MultimodalSample, TripletSampler, augment, stack_modalities
from .losses import (Centroids, LossWeights, TripletScheme, center_loss, cross_entropy_label_smoothing,
                     select_triplet_embeddings, soft_margin_triplet, total_loss)
from .model import GraftConfig, GraftModel
from .nn import ConfigError
from .optim import AdamW

log = logging.getLogger(__name__)

SCHEDULES = ("warmup_sqrt_cooldown", "constant")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: str | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass
class StageConfig:
    stage: int = 1
    epochs: int = 20
    base_lr: float = 3e-4
    weight_decay: float = 1e-4
    loss: LossWeights = field(default_factory=lambda: LossWeights(0.5, 0.0, 0.5))
    label_smoothing: float = 0.0
    backbone_frozen: bool = True
    schedule: str = "warmup_sqrt_cooldown"
    warmup_steps: int = 10
    cooldown_fraction: float = 0.10
    batch_triplets: int = 26
    positives_per_anchor: int = 8
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    center_metric: str = "euclidean"
    clip_norm: float | None = None
    seed: int = 0

    @classmethod
    def stage_one(cls, **kw) -> "StageConfig":
        return cls(**kw)

    @classmethod
    def stage_two(cls, **kw) -> "StageConfig":
        base = dict(stage=2, epochs=10, base_lr=5e-6, loss=LossWeights(0.5, 0.0005, 0.5), label_smoothing=0.1,
                    backbone_frozen=False, schedule="constant")
        base.update(kw)
        return cls(**base)

    def validate(self) -> "StageConfig":
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        self.loss.validate()
        self.augment.validate()
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.stage == 1 and (not self.backbone_frozen or self.loss.beta != 0):
            raise ConfigError("stage one requires backbone_frozen=true and loss.beta=0")
        if self.stage == 2 and (self.backbone_frozen or self.schedule != "constant"):
            raise ConfigError("stage two requires backbone_frozen=false and schedule='constant'")
        if self.epochs < 0 or self.base_lr < 0 or self.weight_decay < 0:
            raise ConfigError("epochs, base_lr and weight_decay must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if not 0.0 <= self.cooldown_fraction < 1.0:
            raise ConfigError("cooldown_fraction must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        return self


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------

def cooldown_start(total_steps: int, cooldown_fraction: float) -> int:
    return total_steps - int(math.ceil(cooldown_fraction * total_steps))


def _warmup(step: int, base: float, warmup: int) -> float:
    return base * (step + 1) / warmup


def _decay(step: int, base: float, warmup: int) -> float:
    return base * math.sqrt(warmup / (step + 1))


def _cooldown(step: int, base: float, warmup: int, start: int, total: int) -> float:
    return _decay(start, base, warmup) * (total - step) / (total - start)


def lr_at_step(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Linear warmup to ``base_lr``, inverse-sqrt decay, then linear cooldown to 0 over the last fraction."""
    if not 0 <= step < total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps})")
    if cfg.schedule == "constant":
        return cfg.base_lr
    start = cooldown_start(total_steps, cfg.cooldown_fraction)
    if cfg.warmup_steps >= start:
        raise ConfigError(f"warmup_steps={cfg.warmup_steps} must be below the cooldown start {start}")
    if step < cfg.warmup_steps:
        return _warmup(step, cfg.base_lr, cfg.warmup_steps)
    if step < start:
        return _decay(step, cfg.base_lr, cfg.warmup_steps)
    return _cooldown(step, cfg.base_lr, cfg.warmup_steps, start, total_steps)


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------

BACKBONE_PREFIXES = ("patch.", "backbone.")


def freeze_backbone(model: GraftModel, flag: bool = True) -> None:
    for name, p in model.named_parameters():
        if name.startswith(BACKBONE_PREFIXES):
            p.frozen = flag


def trainable_names(model) -> list[str]:
    return [name for name, p in model.named_parameters() if not p.frozen]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    stage: int
    step: int = 0
    epoch: int = 0
    total_steps: int = 0
    history: list = field(default_factory=list)
    checkpoint: str | None = None


def label_map_for(samples: Sequence[MultimodalSample]) -> dict[int, int]:
    return {ident: k for k, ident in enumerate(sorted({s.id for s in samples}))}


class Trainer:
    """Runs one training stage over a sample list; owns optimizer and sampler state."""

    def __init__(self, model: GraftModel, centroids: Centroids, train: Sequence[MultimodalSample],
                 cfg: StageConfig, scheme: TripletScheme | None = None,
                 sink: Callable[[dict], None] | None = None, checkpoint_dir: str | Path | None = None,
                 label_map: dict[int, int] | None = None, meta: dict | None = None):
        self.model = model
        self.centroids = centroids
        self.train = list(train)
        self.cfg = cfg.validate()
        self.scheme = scheme or TripletScheme()
        self.sink = sink
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.label_map = label_map or label_map_for(self.train)
        self.meta = dict(meta or {})
        self.labels = np.array([self.label_map[s.id] for s in self.train])

        freeze_backbone(model, cfg.backbone_frozen)
        centroids.table.frozen = cfg.loss.beta == 0
        params = model.parameters() + centroids.parameters()
        self.optimizer = AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
        self.sampler = TripletSampler(self.train, cfg.batch_triplets, cfg.positives_per_anchor, seed=cfg.seed)
        self.aug_rng = np.random.default_rng([cfg.seed, 1])
        self.state = TrainState(stage=cfg.stage, total_steps=cfg.epochs * self.sampler.steps_per_epoch)

    # -- single step -------------------------------------------------------
    def step(self, batch, lr: float) -> dict:
        try:
            return self._step(batch, lr)
        except DivergenceError:
            raise
        except FloatingPointError as exc:
            raise DivergenceError(f"{exc} at step {self.state.step}", self.state.checkpoint) from exc

    def _step(self, batch, lr: float) -> dict:
        cfg = self.cfg
        uniq, pa, pp, pn = batch.unique()
        samples = [augment(self.train[i], self.aug_rng, cfg.augment) for i in uniq]
        labels = self.labels[uniq]
        self.model.train()
        out = self.model(stack_modalities(samples))
        f_a, f_p, f_n = select_triplet_embeddings(self.scheme, out.embed, out.data_tokens, pa, pp, pn)
        l_t = soft_margin_triplet(f_a, f_p, f_n)
        l_c = center_loss(f_a, labels[pa], self.centroids.table, cfg.center_metric)
        l_ce = cross_entropy_label_smoothing(out.logits, labels, cfg.label_smoothing)
        parts = total_loss(l_t, l_c, l_ce, cfg.loss)
        value = parts.total.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {self.state.step}", self.state.checkpoint)
        self.optimizer.zero_grad()
        parts.total.backward()
        self.optimizer.step(lr)
        return {"stage": cfg.stage, "step": self.state.step, "epoch": self.state.epoch, "lr": lr,
                "L_T": parts.triplet, "L_C": parts.center, "L_CE": parts.ce, "L_total": value}

    def run(self, max_epochs: int | None = None) -> TrainState:
        """Train until ``cfg.epochs`` (or ``max_epochs`` more epochs), checkpointing every epoch."""
        stop = self.cfg.epochs if max_epochs is None else min(self.cfg.epochs, self.state.epoch + max_epochs)
        while self.state.epoch < stop:
            for batch in self.sampler.epoch():
                lr = lr_at_step(self.state.step, self.state.total_steps, self.cfg)
                record = self.step(batch, lr)
                self.state.history.append(record)
                if self.sink is not None:
                    self.sink(record)
                self.state.step += 1
            self.state.epoch += 1
            if self.checkpoint_dir is not None:
                path = self.checkpoint_dir / f"stage{self.cfg.stage}_epoch{self.state.epoch:03d}.ckpt"
                self.save(path)
                self.save(self.checkpoint_dir / f"stage{self.cfg.stage}_last.ckpt")
                self.state.checkpoint = str(path)
        return self.state

    # -- persistence ---------------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        entries = module_entries(self.model, "model.")
        entries.update(module_entries(self.centroids, "centroids."))
        for name, arr in self.optimizer.state_arrays().items():
            entries[name] = Entry(arr.copy(), "state")
        meta = dict(self.meta)
        meta.update({
            "stage": self.cfg.stage,
            "step": self.state.step,
            "epoch": self.state.epoch,
            "total_steps": self.state.total_steps,
            "optimizer_step": self.optimizer.step_count,
            "sampler_rng": self.sampler.get_state(),
            "augment_rng": self.aug_rng.bit_generator.state,
            "model_config": self.model.cfg.to_dict(),
            "label_map": [[int(k), int(v)] for k, v in sorted(self.label_map.items())],
            "scheme": self.scheme.code,
            "data_token_index": self.scheme.data_token_index,
        })
        return Checkpoint(entries, meta)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.checkpoint())

    def resume(self, path: str | Path) -> "Trainer":
        ckpt = load_checkpoint(path)
        meta = ckpt.meta
        if meta.get("stage") != self.cfg.stage:
            raise ConfigError(f"checkpoint {path} is from stage {meta.get('stage')}, not stage {self.cfg.stage}")
        restore_model(self.model, self.centroids, ckpt)
        # frozen flags follow this stage's config, not the checkpoint
        freeze_backbone(self.model, self.cfg.backbone_frozen)
        self.centroids.table.frozen = self.cfg.loss.beta == 0
        self.optimizer.load_state_arrays({k: e.data for k, e in ckpt.entries.items() if e.kind == "state"},
                                         meta["optimizer_step"])
        self.sampler.set_state(meta["sampler_rng"])
        self.aug_rng.bit_generator.state = meta["augment_rng"]
        self.state.step = meta["step"]
        self.state.epoch = meta["epoch"]
        self.state.checkpoint = str(path)
        return self


def restore_model(model: GraftModel, centroids: Centroids | None, ckpt: Checkpoint) -> None:
    load_module_entries(model, ckpt.entries, "model.")
    if centroids is not None:
        load_module_entries(centroids, ckpt.entries, "centroids.")


def model_from_checkpoint(path: str | Path) -> tuple[GraftModel, Centroids, Checkpoint]:
    ckpt = load_checkpoint(path)
    cfg = GraftConfig(**ckpt.meta["model_config"])
    model = GraftModel(cfg)
    centroids = Centroids(cfg.n_classes, cfg.embed_out_dim, np.random.default_rng(cfg.seed + 2))
    restore_model(model, centroids, ckpt)
    return model, centroids, ckpt


def new_centroids(cfg: GraftConfig) -> Centroids:
    return Centroids(cfg.n_classes, cfg.embed_out_dim, np.random.default_rng(cfg.seed + 2))


def run_stage(model: GraftModel, centroids: Centroids, train: Sequence[MultimodalSample], cfg: StageConfig,
              scheme: TripletScheme | None = None, sink: Callable[[dict], None] | None = None,
              checkpoint_dir: str | Path | None = None, resume_from: str | Path | None = None,
              label_map: dict[int, int] | None = None, meta: dict | None = None) -> TrainState:
    trainer = Trainer(model, centroids, train, cfg, scheme, sink, checkpoint_dir, label_map, meta)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.run()


def warm_start(model: GraftModel, train: Sequence[MultimodalSample], epochs: int, lr: float = 1e-3,
               batch_size: int = 32, seed: int = 0, label_map: dict[int, int] | None = None) -> list[float]:
    """Emulate a pretrained backbone: train the whole model on identity classification,
    keep the resulting patch embedding and backbone, and reset everything else to its
    initial values. Returns per-step losses."""
    if epochs <= 0:
        return []
    label_map = label_map or label_map_for(train)
    initial = module_entries(model)
    freeze_backbone(model, False)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    rng = np.random.default_rng([seed, 7])
    labels = np.array([label_map[s.id] for s in train])
    losses = []
    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            out = model(stack_modalities([train[i] for i in idx]))
            loss = cross_entropy_label_smoothing(out.logits, labels[idx], 0.1)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    keep = {k: v for k, v in initial.items() if not k.startswith(BACKBONE_PREFIXES)}
    for name, p in model.named_parameters():
        if name in keep:
            p.data[...] = keep[name].data
    for name, buf in model.named_buffers():
        buf[...] = initial[name].data
    return losses


class JsonlSink:
    """Append step records as JSON lines."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

"""Layer-wise unstructured magnitude pruning of backbone weights with fine-tuning between steps."""

from __future__ import annotations

import csv
import fnmatch
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_module_entries, module_entries
from .model import count_parameters
from .nn import ConfigError, Module, Parameter
from .train import DivergenceError, Trainer

log = logging.getLogger(__name__)

DEFAULT_SCOPE = (
    "backbone.blocks.*.attn.q",
    "backbone.blocks.*.attn.k",
    "backbone.blocks.*.attn.v",
    "backbone.blocks.*.attn.o",
    "backbone.blocks.*.mlp.fc1.weight",
    "backbone.blocks.*.mlp.fc2.weight",
)

PARETO_COLUMNS = ("ladder_step", "sparsity", "achieved_sparsity", "nonzero_params", "total_params",
                  "mAP", "R1", "R5", "R10", "status")


@dataclass
class PrunePlan:
    target_sparsity: float = 0.5
    n_iterations: int = 3
    finetune_epochs: int = 1
    scope: tuple = DEFAULT_SCOPE
    ladder: tuple | None = None

    def schedule(self) -> list[float]:
        """Per-step sparsities. Default: remaining density shrinks geometrically to 1 - target."""
        if self.ladder is not None:
            return [float(s) for s in self.ladder]
        density = 1.0 - self.target_sparsity
        return [1.0 - density ** ((t + 1) / self.n_iterations) for t in range(self.n_iterations)]

    def validate(self) -> "PrunePlan":
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError("prune.target_sparsity must lie in [0, 1)")
        if self.n_iterations < 1 or self.finetune_epochs < 0:
            raise ConfigError("prune.n_iterations must be >= 1 and prune.finetune_epochs >= 0")
        ladder = self.schedule()
        if any(b <= a for a, b in zip(ladder, ladder[1:])) or ladder[0] <= 0.0:
            raise ConfigError(f"prune ladder must be strictly increasing from above 0, got {ladder}")
        if not math.isclose(ladder[-1], self.target_sparsity, abs_tol=1e-12):
            raise ConfigError(f"prune ladder ends at {ladder[-1]}, not the target {self.target_sparsity}")
        return self


@dataclass
class PruneMask:
    masks: dict = field(default_factory=dict)
    sparsity: dict = field(default_factory=dict)

    def zeros(self) -> dict:
        return {name: ~m for name, m in self.masks.items()}


def magnitude_prune(param: Parameter | np.ndarray, sparsity: float, prior_mask: np.ndarray | None = None) -> np.ndarray:
    """Keep-mask that zeroes the floor(sparsity * n) smallest-magnitude entries.

    Entries already pruned by ``prior_mask`` go first, then ascending |w|, then
    ascending flat index, so masks only ever gain zeros.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1), got {sparsity}")
    w = np.asarray(param.data if isinstance(param, Parameter) else param)
    flat = np.abs(w.ravel())
    n_prune = int(math.floor(sparsity * flat.size))
    already = np.zeros(flat.size, dtype=bool) if prior_mask is None else ~np.asarray(prior_mask, bool).ravel()
    if n_prune < already.sum():
        raise ConfigError(f"sparsity {sparsity} would un-prune {int(already.sum()) - n_prune} entries")
    order = np.lexsort((np.arange(flat.size), flat, ~already))
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:n_prune]] = False
    return keep.reshape(w.shape)


def scoped_parameters(model: Module, scope: Sequence[str]) -> list[Parameter]:
    params = [p for name, p in model.named_parameters() if any(fnmatch.fnmatchcase(name, pat) for pat in scope)]
    if not params:
        raise ConfigError(f"prune scope {list(scope)} matches no parameter")
    return params


def prune_model(model: Module, sparsity: float, scope: Sequence[str] = DEFAULT_SCOPE) -> PruneMask:
    """Prune each in-scope tensor to ``sparsity`` and install the masks."""
    result = PruneMask()
    for p in scoped_parameters(model, scope):
        keep = magnitude_prune(p, sparsity, p.mask)
        p.set_mask(keep)
        result.masks[p.name] = keep
        result.sparsity[p.name] = 1.0 - keep.mean()
    return result


def scope_sparsity(model: Module, scope: Sequence[str]) -> float:
    params = scoped_parameters(model, scope)
    total = sum(p.data.size for p in params)
    zeros = sum(int(np.sum(~p.mask)) if p.mask is not None else 0 for p in params)
    return zeros / total


def iterative_prune_finetune(model, centroids, train, plan: PrunePlan, finetune_cfg,
                             evaluate_fn: Callable[[Module], dict], scheme=None,
                             sink: Callable[[dict], None] | None = None) -> list[dict]:
    """Prune along the ladder, fine-tuning and evaluating after each step.

    The first row is the dense model. A step whose fine-tuning diverges is
    rolled back to the previous snapshot and the ladder stops there.
    """
    plan.validate()
    rows = [_row(model, 0, 0.0, plan, evaluate_fn(model), "dense")]
    if sink:
        sink(rows[-1])
    for t, sparsity in enumerate(plan.schedule(), start=1):
        snapshot = module_entries(model), module_entries(centroids)
        prune_model(model, sparsity, plan.scope)
        status = "ok"
        if plan.finetune_epochs > 0:
            cfg = _with_epochs(finetune_cfg, plan.finetune_epochs, t)
            try:
                Trainer(model, centroids, train, cfg, scheme).run()
            except DivergenceError as err:
                log.error("fine-tuning diverged at ladder step %d: %s", t, err)
                load_module_entries(model, snapshot[0])
                load_module_entries(centroids, snapshot[1])
                status = "diverged"
        row = _row(model, t, sparsity, plan, evaluate_fn(model) if status == "ok" else {}, status)
        rows.append(row)
        if sink:
            sink(row)
        if status != "ok":
            break
    return rows


def _with_epochs(cfg, epochs: int, step: int):
    return replace(cfg, epochs=epochs, seed=cfg.seed + 1000 * step)


def _row(model, step: int, sparsity: float, plan: PrunePlan, metrics: dict, status: str) -> dict:
    counts = count_parameters(model, by_group=False, nonzero=True)
    total = count_parameters(model, by_group=False)
    return {
        "ladder_step": step,
        "sparsity": sparsity,
        "achieved_sparsity": scope_sparsity(model, plan.scope),
        "nonzero_params": counts["total"],
        "total_params": total["total"],
        "mAP": metrics.get("mAP", float("nan")),
        "R1": metrics.get("R1", float("nan")),
        "R5": metrics.get("R5", float("nan")),
        "R10": metrics.get("R10", float("nan")),
        "status": status,
    }


def write_pareto_csv(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PARETO_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in PARETO_COLUMNS})
    return path

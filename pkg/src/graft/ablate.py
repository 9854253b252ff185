"""Named ablation suites: grids of pipeline runs that share seeds and a base config."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, from_dict, to_dict
from .data import DatasetSplit, generate_synthetic, modality_names
from .losses import ALL_SCHEMES
from .nn import ConfigError

log = logging.getLogger(__name__)

SUITES = ("fusion", "triplet-scheme", "modalities", "token-index")

FUSION_CELLS = (("vanilla-cls", "vanilla_cls"), ("vanilla-averaged", "vanilla_avg"), ("graft-fusion-token", "graft"))

ROW_COLUMNS = ("suite", "cell", "seed", "status", "mAP", "R1", "R5", "R10", "chance_mAP", "error")
SUMMARY_COLUMNS = ("suite", "cell", "n_ok", "mean_mAP", "std_mAP", "mean_R1", "delta_mAP")


@dataclass
class Cell:
    label: str
    config: RunConfig
    modalities: tuple | None = None


@dataclass
class AblationResult:
    suite: str
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def mean_map(self, label: str) -> float:
        for row in self.summary:
            if row["cell"] == label:
                return row["mean_mAP"]
        raise KeyError(label)


def _copy(cfg: RunConfig) -> RunConfig:
    return from_dict(RunConfig, to_dict(cfg))


def modality_subsets(names: Sequence[str]) -> list[tuple[str, ...]]:
    """All non-empty subsets, smallest first, in modality order within each size."""
    return [c for k in range(1, len(names) + 1) for c in itertools.combinations(names, k)]


def token_indices(n_patches: int) -> list[int]:
    return [0, n_patches // 4, n_patches // 2, 3 * n_patches // 4]


def suite_cells(suite: str, cfg: RunConfig) -> list[Cell]:
    if suite == "fusion":
        cells = []
        for label, mode in FUSION_CELLS:
            c = _copy(cfg)
            c.model.fusion = mode
            cells.append(Cell(label, c))
        return cells
    if suite == "triplet-scheme":
        cells = []
        for code in ALL_SCHEMES:
            c = _copy(cfg)
            c.loss.scheme = code
            cells.append(Cell(code, c))
        return cells
    if suite == "modalities":
        names = modality_names(cfg.data.synthetic.n_modalities)
        return [Cell("+".join(sub), _copy(cfg), sub) for sub in modality_subsets(names)]
    if suite == "token-index":
        cells = []
        for idx in token_indices(cfg.model.n_patches):
            c = _copy(cfg)
            c.loss.data_token_index = idx
            cells.append(Cell(f"index-{idx}", c))
        return cells
    raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")


def run_suite(suite: str, cfg: RunConfig, seeds: Sequence[int] = (0, 1, 2), out_dir: str | Path | None = None,
              runner: Callable | None = None, cells: Sequence[str] | None = None) -> AblationResult:
    """Run every cell of ``suite`` for every seed; a failing cell is recorded and the suite continues.

    All cells of a seed see the same generated data and the same seed-derived
    initialisation, so differences come from the ablated factor alone.
    ``cells`` restricts the grid to the named labels.
    """
    from .experiment import train_pipeline

    runner = runner or train_pipeline
    grid = suite_cells(suite, cfg)
    if cells is not None:
        unknown = sorted(set(cells) - {c.label for c in grid})
        if unknown:
            raise ConfigError(f"suite {suite} has no cell(s) {unknown}")
        grid = [c for c in grid if c.label in set(cells)]
    cells = grid
    result = AblationResult(suite)
    for seed in seeds:
        data_cache: dict = {}
        for cell in cells:
            seeded = cell.config.with_seed(seed)
            row = {"suite": suite, "cell": cell.label, "seed": seed, "status": "ok", "error": ""}
            try:
                split = _split_for(seeded, data_cache)
                if cell.modalities is not None:
                    split = split.select_modalities(list(cell.modalities))
                cell_out = Path(out_dir) / suite / f"{cell.label}_seed{seed}" if out_dir else None
                metrics = runner(seeded, split=split, out_dir=cell_out).metrics
                row.update({k: metrics.get(k, float("nan")) for k in ("mAP", "R1", "R5", "R10", "chance_mAP")})
            except Exception as err:  # noqa: BLE001 - a cell failure must not stop the grid
                log.error("suite %s cell %s seed %d failed: %s", suite, cell.label, seed, err)
                row.update({"status": "failed", "error": f"{type(err).__name__}: {err}"})
                row.update({k: float("nan") for k in ("mAP", "R1", "R5", "R10", "chance_mAP")})
            result.rows.append(row)
    result.summary = summarize(result.rows, [c.label for c in cells], suite)
    if suite == "token-index":
        means = [r["mean_mAP"] for r in result.summary]
        result.extra["std_mAP_across_indices"] = float(np.std(means, ddof=1)) if len(means) > 1 else 0.0
    if out_dir is not None:
        write_suite_csvs(result, out_dir)
    return result


def _split_for(cfg: RunConfig, cache: dict) -> DatasetSplit:
    from .data import load_directory
    key = cfg.data.path or cfg.data.synthetic.seed
    if key not in cache:
        split = load_directory(cfg.data.path) if cfg.data.path else generate_synthetic(cfg.data.synthetic)
        if cfg.data.modalities:
            split = split.select_modalities(cfg.data.modalities)
        cache[key] = split
    return cache[key]


def summarize(rows: Sequence[dict], labels: Sequence[str], suite: str) -> list[dict]:
    """Per-cell means over successful seeds.

    Deltas are against the full method: the last cell for the fusion and
    modality suites, the first (FFD, index 0) for the others.
    """
    out = []
    for label in labels:
        ok = [r for r in rows if r["cell"] == label and r["status"] == "ok"]
        maps = np.array([r["mAP"] for r in ok], dtype=np.float64)
        out.append({
            "suite": suite,
            "cell": label,
            "n_ok": len(ok),
            "mean_mAP": float(maps.mean()) if len(maps) else float("nan"),
            "std_mAP": float(maps.std(ddof=1)) if len(maps) > 1 else (0.0 if len(maps) else float("nan")),
            "mean_R1": float(np.mean([r["R1"] for r in ok])) if ok else float("nan"),
        })
    ref = out[-1]["mean_mAP"] if suite in ("fusion", "modalities") else out[0]["mean_mAP"]
    for row in out:
        row["delta_mAP"] = row["mean_mAP"] - ref
    return out


def write_suite_csvs(result: AblationResult, out_dir: str | Path) -> tuple[Path, Path]:
    root = Path(out_dir) / result.suite
    root.mkdir(parents=True, exist_ok=True)
    cells_path = root / "cells.csv"
    summary_path = root / "summary.csv"
    with open(cells_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_COLUMNS)
        writer.writeheader()
        writer.writerows({k: r.get(k, "") for k in ROW_COLUMNS} for r in result.rows)
    columns = SUMMARY_COLUMNS + tuple(sorted(result.extra))
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in result.summary:
            writer.writerow({**{k: r.get(k, "") for k in SUMMARY_COLUMNS}, **result.extra})
    return cells_path, summary_path

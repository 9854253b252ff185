"""Run configuration: nested dataclasses loaded from YAML/JSON with strict key checking."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import AugmentPolicy, SyntheticSpec
from .losses import LossWeights, TripletScheme
from .model import GraftConfig
from .nn import ConfigError
from .prune import PrunePlan
from .train import StageConfig


@dataclass
class DataConfig:
    path: str | None = None
    modalities: list | None = None
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class LossConfig:
    scheme: str = "FFD"
    data_token_index: int = 0
    center_metric: str = "euclidean"

    def triplet_scheme(self) -> TripletScheme:
        return TripletScheme.parse(self.scheme, self.data_token_index)


@dataclass
class PretrainConfig:
    epochs: int = 0
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class EvalConfig:
    metric: str = "euclidean"
    exclude_same_view: bool = False
    batch_size: int = 64
    ks: list = field(default_factory=lambda: [1, 5, 10])


@dataclass
class RunConfig:
    model: GraftConfig = field(default_factory=GraftConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: StageConfig = field(default_factory=StageConfig.stage_one)
    stage2: StageConfig = field(default_factory=StageConfig.stage_two)
    loss: LossConfig = field(default_factory=LossConfig)
    prune: PrunePlan = field(default_factory=PrunePlan)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.synthetic.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.prune.validate()
        scheme = self.loss.triplet_scheme()
        if scheme.uses_data and not 0 <= scheme.data_token_index < self.model.n_patches:
            raise ConfigError(f"loss.data_token_index {scheme.data_token_index} must be < {self.model.n_patches}")
        if self.loss.center_metric not in ("euclidean", "cosine"):
            raise ConfigError("loss.center_metric must be 'euclidean' or 'cosine'")
        if self.eval.metric not in ("euclidean", "cosine"):
            raise ConfigError("eval.metric must be 'euclidean' or 'cosine'")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seed derived from ``seed``."""
        cfg = from_dict(RunConfig, to_dict(self))
        cfg.seed = seed
        cfg.model.seed = seed
        cfg.data.synthetic.seed = seed
        cfg.stage1.seed = seed
        cfg.stage2.seed = seed + 1
        return cfg

    def to_dict(self) -> dict:
        return to_dict(self)

    def hash(self) -> str:
        return config_hash(self)


def to_dict(obj) -> dict:
    def convert(v):
        if dataclasses.is_dataclass(v):
            return {f.name: convert(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        return v

    return convert(obj)


def from_dict(cls, data: dict | None, path: str = "config", base=None):
    """Build dataclass ``cls`` from ``data``; unknown keys and wrong types raise ConfigError naming the field.

    Missing keys fall back to ``base`` (or the field defaults), so a partial
    nested section keeps the defaults of the object it overrides.
    """
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    if base is None:
        try:
            base = cls()
        except TypeError:
            base = None
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = getattr(base, f.name) if base is not None else None
        if f.name not in data:
            if base is not None:
                kwargs[f.name] = copy.deepcopy(default)
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}", default)
    try:
        obj = cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return obj


def _coerce(tp, value, path: str, default=None):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path, default)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path, default if dataclasses.is_dataclass(default) else None)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if tp in (tuple, list) or origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value) if (tp is tuple or origin is tuple) else list(value)
    return value


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: cannot parse: {err}") from None
    return from_dict(RunConfig, raw).validate()


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()[:16]


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path


class ResultsLedger:
    """Append-only JSON-lines file of run records keyed by config hash."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, kind: str, cfg: RunConfig, payload: dict) -> dict:
        record = {
            "kind": kind,
            "config_hash": config_hash(cfg),
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config": to_dict(cfg),
            **payload,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True, default=float) + "\n")
        return record

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]


__all__ = [
    "AugmentPolicy", "DataConfig", "EvalConfig", "LossConfig", "LossWeights", "PretrainConfig", "RunConfig",
    "ResultsLedger", "config_hash", "from_dict", "load_config", "to_dict", "write_resolved",
]

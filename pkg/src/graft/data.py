"""Multimodal identity datasets: synthetic generation, on-disk layout, augmentation
and triplet sampling with several positives per anchor."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .nn import ConfigError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
DEFAULT_MODALITY_NAMES = ("R", "N", "T")
_FILE_RE = re.compile(r"^(\d+)_(\d+)_(\d+)\.png$")


class DataError(ValueError):
    """Raised for malformed or incomplete datasets."""


@dataclass(frozen=True)
class MultimodalSample:
    id: int
    view: int
    idx: int
    images: tuple  # M arrays of shape (C, H, W), values in [0, 1]

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.id, self.view, self.idx)


@dataclass
class DatasetSplit:
    train: list
    query: list
    gallery: list
    modalities: tuple = ()

    def __post_init__(self):
        if not self.modalities:
            sample = (self.train or self.query or self.gallery or [None])[0]
            m = len(sample.images) if sample is not None else 0
            self.modalities = modality_names(m)
        self.modalities = tuple(self.modalities)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train[0].images[0].shape)

    def select_modalities(self, names_or_idx: Sequence) -> "DatasetSplit":
        """Restrict every sample to a subset of modalities (by name or position)."""
        idx = [self.modalities.index(x) if isinstance(x, str) else int(x) for x in names_or_idx]

        def sub(samples):
            return [replace(s, images=tuple(s.images[i] for i in idx)) for s in samples]

        return DatasetSplit(sub(self.train), sub(self.query), sub(self.gallery),
                            tuple(self.modalities[i] for i in idx))


def modality_names(m: int) -> tuple[str, ...]:
    if m <= len(DEFAULT_MODALITY_NAMES):
        return DEFAULT_MODALITY_NAMES[:m]
    return tuple(f"m{i}" for i in range(m))


def stack_modalities(samples: Sequence[MultimodalSample]) -> list[np.ndarray]:
    """One (N, C, H, W) array per modality."""
    m = len(samples[0].images)
    return [np.stack([s.images[i] for s in samples]) for i in range(m)]


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Identities rendered through per-modality random projections.

    Each identity has a latent code. Modality ``i`` sees its own block of the
    code at ``own_gain`` and the rest at ``cross_gain``, so single modalities
    are partly discriminative and their union is more so. Each sample adds a
    view-dependent nuisance pattern, a per-sample jitter of the code, and
    pixel noise.
    """

    n_ids: int = 10
    n_test_ids: int = 0
    samples_per_id: int = 8
    query_per_id: int = 3
    gallery_per_id: int = 8
    n_views: int = 4
    n_modalities: int = 2
    channels: int = 3
    height: int = 32
    width: int = 32
    cell: int = 4
    latent_dim: int = 12
    own_gain: float = 1.0
    cross_gain: float = 0.2
    code_jitter: float = 0.6
    view_strength: float = 1.2
    noise: float = 1.0
    amplitude: float = 0.12
    seed: int = 0
    max_retries: int = 5

    def validate(self) -> "SyntheticSpec":
        if self.n_ids < 2:
            raise ConfigError("data.n_ids must be >= 2")
        if self.samples_per_id < 2:
            raise ConfigError("data.samples_per_id must be >= 2 so every anchor has a positive")
        if self.query_per_id < 1 or self.gallery_per_id < 1:
            raise ConfigError("data.query_per_id and data.gallery_per_id must be >= 1")
        if self.n_views < 1 or self.n_modalities < 1 or self.channels < 1:
            raise ConfigError("data.n_views, data.n_modalities and data.channels must be >= 1")
        if self.height % self.cell or self.width % self.cell:
            raise ConfigError(f"data: image {self.height}x{self.width} not divisible by cell {self.cell}")
        if self.latent_dim < self.n_modalities:
            raise ConfigError("data.latent_dim must be >= data.n_modalities")
        for key in ("noise", "code_jitter", "view_strength", "amplitude", "cross_gain", "own_gain"):
            if getattr(self, key) < 0:
                raise ConfigError(f"data.{key} must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _blocky_basis(rng, n, c, h, w, cell) -> np.ndarray:
    """``n`` random patterns of shape (C, H, W), constant on cell x cell squares, unit pixel variance."""
    low = rng.standard_normal((n, c, h // cell, w // cell))
    return np.kron(low, np.ones((1, 1, cell, cell)))


def _render(spec: SyntheticSpec, rng: np.random.Generator):
    m, k = spec.n_modalities, spec.latent_dim
    c, h, w = spec.channels, spec.height, spec.width
    gains = np.full((m, k), spec.cross_gain)
    for i, block in enumerate(np.array_split(np.arange(k), m)):
        gains[i, block] = spec.own_gain
    bases = [_blocky_basis(rng, k, c, h, w, spec.cell) / math.sqrt(k) for _ in range(m)]
    view_bases = [_blocky_basis(rng, spec.n_views, c, h, w, spec.cell) for _ in range(m)]

    total_ids = spec.n_ids + spec.n_test_ids
    codes = rng.standard_normal((total_ids, k))

    def draw(identity: int, view: int, idx: int) -> MultimodalSample:
        z = codes[identity] + spec.code_jitter * rng.standard_normal(k)
        images = []
        for i in range(m):
            signal = np.tensordot(gains[i] * z, bases[i], axes=1)
            nuisance = spec.view_strength * view_bases[i][view]
            noise = spec.noise * rng.standard_normal((c, h, w))
            img = 0.5 + spec.amplitude * (signal + nuisance + noise)
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
            images.append(img)
        return MultimodalSample(identity, view, idx, tuple(images))

    train, query, gallery = [], [], []
    counters = np.zeros(total_ids, dtype=int)

    def emit(identity: int, n: int, out: list) -> None:
        for _ in range(n):
            view = int(rng.integers(spec.n_views))
            out.append(draw(identity, view, int(counters[identity])))
            counters[identity] += 1

    for identity in range(spec.n_ids):
        emit(identity, spec.samples_per_id, train)
    test_ids = range(spec.n_ids, total_ids) if spec.n_test_ids else range(spec.n_ids)
    for identity in test_ids:
        emit(identity, spec.query_per_id, query)
        emit(identity, spec.gallery_per_id, gallery)
    return DatasetSplit(train, query, gallery, modality_names(m))


def raw_pixel_rank1(split: DatasetSplit, modalities: Sequence[int] | None = None) -> float:
    """Nearest-neighbour Rank-1 of query against gallery on raw (concatenated) pixels."""
    idx = list(range(split.n_modalities)) if modalities is None else list(modalities)

    def feats(samples):
        return np.stack([np.concatenate([s.images[i].ravel() for i in idx]) for s in samples])

    q, g = feats(split.query), feats(split.gallery)
    d = (q**2).sum(1)[:, None] + (g**2).sum(1)[None, :] - 2.0 * q @ g.T
    nearest = np.argmin(d, axis=1)
    gid = np.array([s.id for s in split.gallery])
    qid = np.array([s.id for s in split.query])
    return float(np.mean(gid[nearest] == qid))


def generate_synthetic(spec: SyntheticSpec, check_separability: bool = True) -> DatasetSplit:
    """Deterministic synthetic split. For M > 1 the raw-pixel Rank-1 on all
    modalities must beat every single modality; otherwise the split is
    regenerated from a derived seed, up to ``max_retries`` times."""
    spec.validate()
    for attempt in range(spec.max_retries + 1):
        rng = np.random.default_rng([spec.seed, attempt])
        split = _render(spec, rng)
        if not check_separability or spec.n_modalities == 1:
            return split
        joint = raw_pixel_rank1(split)
        singles = [raw_pixel_rank1(split, [i]) for i in range(spec.n_modalities)]
        if joint > max(singles):
            return split
        log.warning("synthetic split attempt %d not separable (joint R1 %.3f, singles %s); retrying",
                    attempt, joint, [round(s, 3) for s in singles])
    raise DataError("could not generate a split where all modalities beat each single modality")


# ---------------------------------------------------------------------------
# on-disk layout: root/{train,query,gallery}/<modality>/<id>_<view>_<idx>.png
# ---------------------------------------------------------------------------

def _to_pil(img: np.ndarray) -> Image.Image:
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0], mode="L")
    if arr.shape[0] == 3:
        return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    raise DataError(f"only 1- or 3-channel images can be written, got {arr.shape[0]} channels")


def _from_pil(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def export_directory(split: DatasetSplit, root: str | Path) -> Path:
    """Write ``split`` as PNG files plus ``manifest.json``; readable by :func:`load_directory`."""
    root = Path(root)
    counts = {}
    for name in SPLITS:
        samples = getattr(split, name)
        counts[name] = len(samples)
        for mi, modality in enumerate(split.modalities):
            d = root / name / modality
            d.mkdir(parents=True, exist_ok=True)
            for s in samples:
                _to_pil(s.images[mi]).save(d / f"{s.id}_{s.view}_{s.idx}.png")
    manifest = {
        "format": "graft-dataset-1",
        "modalities": list(split.modalities),
        "splits": counts,
        "image_shape": list(split.image_shape) if split.train else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_directory(root: str | Path) -> DatasetSplit:
    root = Path(root)
    manifest_path = root / "manifest.json"
    modalities = None
    if manifest_path.exists():
        modalities = tuple(json.loads(manifest_path.read_text())["modalities"])
    parts = {}
    for name in SPLITS:
        split_dir = root / name
        if not split_dir.is_dir():
            raise DataError(f"{name} missing: no directory {split_dir}")
        found = tuple(sorted(p.name for p in split_dir.iterdir() if p.is_dir()))
        mods = modalities or found
        if set(found) != set(mods):
            raise DataError(f"{name}: modality dirs {found} do not match manifest {mods}")
        if not mods:
            raise DataError(f"{name} empty")
        files: dict[tuple, dict[str, Path]] = {}
        for mod in mods:
            for path in sorted((split_dir / mod).iterdir()):
                match = _FILE_RE.match(path.name)
                if not match:
                    raise DataError(f"{name}/{mod}: unrecognised file name {path.name!r}")
                key = tuple(int(g) for g in match.groups())
                files.setdefault(key, {})[mod] = path
        if not files:
            raise DataError(f"{name} empty")
        samples = []
        for key in sorted(files):
            missing = [mod for mod in mods if mod not in files[key]]
            if missing:
                raise DataError(f"{name}: tuple {key} (id, view, idx) has no counterpart in modalities {missing}")
            images = tuple(_from_pil(files[key][mod]) for mod in mods)
            samples.append(MultimodalSample(key[0], key[1], key[2], images))
        parts[name] = samples
        modalities = mods
    return DatasetSplit(parts["train"], parts["query"], parts["gallery"], modalities)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    hflip: float = 0.5
    vflip: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple = (0.02, 0.33)
    erase_aspect: tuple = (0.3, 3.3)
    erase_fill: float = 0.0
    erase_attempts: int = 10

    def validate(self) -> "AugmentPolicy":
        for key in ("hflip", "vflip", "erase_prob"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"augment.{key} must lie in [0, 1]")
        lo, hi = self.erase_area
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError("augment.erase_area must satisfy 0 < lo <= hi < 1")
        lo, hi = self.erase_aspect
        if not 0.0 < lo <= hi:
            raise ConfigError("augment.erase_aspect must satisfy 0 < lo <= hi")
        return self


def random_erase(img: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy):
    """Fill a random rectangle; returns (image, box) with box = (top, left, h, w) or None."""
    _, h, w = img.shape
    area = h * w
    lo, hi = policy.erase_area
    log_lo, log_hi = math.log(policy.erase_aspect[0]), math.log(policy.erase_aspect[1])
    for _ in range(policy.erase_attempts):
        target = rng.uniform(lo, hi) * area
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if not (0 < eh < h and 0 < ew < w) or not lo <= eh * ew / area <= hi:
            continue
        top = int(rng.integers(0, h - eh + 1))
        left = int(rng.integers(0, w - ew + 1))
        out = img.copy()
        out[:, top:top + eh, left:left + ew] = policy.erase_fill
        return out, (top, left, eh, ew)
    return img, None


def augment(sample: MultimodalSample, rng: np.random.Generator, policy: AugmentPolicy) -> MultimodalSample:
    """Shared flips across modalities, independent random erasing per modality."""
    hflip = rng.random() < policy.hflip
    vflip = rng.random() < policy.vflip
    images = []
    for img in sample.images:
        if hflip:
            img = img[:, :, ::-1]
        if vflip:
            img = img[:, ::-1, :]
        if rng.random() < policy.erase_prob:
            img, _ = random_erase(img, rng, policy)
        images.append(np.ascontiguousarray(img))
    return replace(sample, images=tuple(images))


# ---------------------------------------------------------------------------
# triplet sampling
# ---------------------------------------------------------------------------

@dataclass
class TripletBatch:
    """Aligned anchor/positive/negative dataset indices; the sampler drew ``positives_per_anchor``
    triplets for each anchor image per epoch."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    positives_per_anchor: int

    def __len__(self) -> int:
        return len(self.anchors)

    def unique(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Distinct dataset indices, and positions of anchors/positives/negatives within them."""
        allidx = np.concatenate([self.anchors, self.positives, self.negatives])
        uniq, inverse = np.unique(allidx, return_inverse=True)
        n = len(self.anchors)
        return uniq, inverse[:n], inverse[n:2 * n], inverse[2 * n:]

    def samples(self, dataset: Sequence[MultimodalSample]):
        return ([dataset[i] for i in self.anchors], [dataset[i] for i in self.positives],
                [dataset[i] for i in self.negatives])


class TripletSampler:
    """Each epoch expands every eligible image into ``positives_per_anchor``
    triplets, shuffles the whole list and cuts it into batches of
    ``batch_triplets`` triplets.

    Positives are distinct when the identity has enough other images (drawn
    with replacement otherwise). A negative picks another identity uniformly,
    then one of its images uniformly.
    """

    def __init__(self, samples: Sequence[MultimodalSample], batch_triplets: int = 26,
                 positives_per_anchor: int = 8, seed: int = 0):
        if batch_triplets < 1 or positives_per_anchor < 1:
            raise ConfigError("batch_triplets and positives_per_anchor must be >= 1")
        self.batch_triplets = batch_triplets
        self.k = positives_per_anchor
        self.rng = np.random.default_rng(seed)
        ids = np.array([s.id for s in samples])
        self.by_id = {int(i): np.flatnonzero(ids == i) for i in np.unique(ids)}
        if len(self.by_id) < 2:
            raise DataError("triplet sampling needs at least two identities")
        singletons = [i for i, members in self.by_id.items() if len(members) < 2]
        if singletons:
            log.warning("identities %s have one image and are excluded from the anchor role", singletons)
        self.eligible = np.array(sorted(j for i, m in self.by_id.items() if len(m) >= 2 for j in m))
        if self.eligible.size == 0:
            raise DataError("no identity has two or more images")
        self.ids = ids
        self.id_list = np.array(sorted(self.by_id))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.eligible) * self.k / self.batch_triplets)

    def _expand(self, anchor: int):
        own = self.by_id[int(self.ids[anchor])]
        cands = own[own != anchor]
        pos = self.rng.choice(cands, size=self.k, replace=len(cands) < self.k)
        others = self.id_list[self.id_list != self.ids[anchor]]
        neg_ids = self.rng.choice(others, size=self.k)
        neg = np.array([self.rng.choice(self.by_id[int(i)]) for i in neg_ids])
        return pos, neg

    def epoch(self) -> Iterator[TripletBatch]:
        anchors = self.rng.permutation(self.eligible)
        a, p, n = [], [], []
        for anchor in anchors:
            pos, neg = self._expand(int(anchor))
            a.append(np.full(self.k, anchor))
            p.append(pos)
            n.append(neg)
        a, p, n = np.concatenate(a), np.concatenate(p), np.concatenate(n)
        order = self.rng.permutation(len(a))
        a, p, n = a[order], p[order], n[order]
        for start in range(0, len(a), self.batch_triplets):
            sl = slice(start, start + self.batch_triplets)
            yield TripletBatch(a[sl], p[sl], n[sl], self.k)

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def sample_triplets(samples: Sequence[MultimodalSample], batch_triplets: int = 26,
                    positives_per_anchor: int = 8, seed: int = 0) -> Iterator[TripletBatch]:
    """Endless stream of triplet batches over ``samples``."""
    sampler = TripletSampler(samples, batch_triplets, positives_per_anchor, seed)
    while True:
        yield from sampler.epoch()

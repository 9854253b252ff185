"""Single-file checkpoints.

Layout::

    b"GRAFTCKPT-1\\n"
    uint64 little-endian: byte length of the JSON manifest
    JSON manifest {"entries": [...], "meta": {...}}
    payloads, in manifest order: each entry's float64 data, then its mask
    (as float64 0/1) when the entry has one

Every payload is raw little-endian float64.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Module, Parameter

HEADER = b"GRAFTCKPT-1\n"
_LE_F64 = np.dtype("<f8")


class CheckpointError(IOError):
    pass


@dataclass
class Entry:
    data: np.ndarray
    kind: str = "param"
    frozen: bool = False
    mask: np.ndarray | None = None


@dataclass
class Checkpoint:
    entries: dict[str, Entry] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    for name, e in ckpt.entries.items():
        manifest_entries.append({
            "name": name,
            "kind": e.kind,
            "shape": list(e.data.shape),
            "dtype": "float64",
            "frozen": bool(e.frozen),
            "mask": e.mask is not None,
        })
    manifest = json.dumps({"entries": manifest_entries, "meta": ckpt.meta}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(HEADER)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for e in ckpt.entries.values():
            fh.write(np.ascontiguousarray(e.data, dtype=_LE_F64).tobytes())
            if e.mask is not None:
                fh.write(np.ascontiguousarray(e.mask, dtype=_LE_F64).tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(HEADER):
        raise CheckpointError(f"{path}: not a GRAFTCKPT-1 file")
    pos = len(HEADER)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    manifest = json.loads(raw[pos:pos + n].decode())
    pos += n
    ckpt = Checkpoint(meta=manifest.get("meta", {}))
    for item in manifest["entries"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        nbytes = count * 8
        data = np.frombuffer(raw, dtype=_LE_F64, count=count, offset=pos).astype(np.float64)
        pos += nbytes
        mask = None
        if item["mask"]:
            mask = np.frombuffer(raw, dtype=_LE_F64, count=count, offset=pos).reshape(item["shape"]) != 0
            pos += nbytes
        ckpt.entries[item["name"]] = Entry(data.reshape(item["shape"]), item["kind"], item["frozen"], mask)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return ckpt


def module_entries(module: Module, prefix: str = "") -> dict[str, Entry]:
    """Parameters and running-stat buffers of ``module`` as checkpoint entries (copied)."""
    out = {}
    for name, p in module.named_parameters():
        out[prefix + name] = Entry(p.data.copy(), "param", p.frozen, None if p.mask is None else p.mask.copy())
    for name, buf in module.named_buffers():
        out[prefix + name] = Entry(buf.copy(), "buffer")
    return out


def load_module_entries(module: Module, entries: dict[str, Entry], prefix: str = "", strict: bool = True) -> None:
    params = dict(module.named_parameters())
    for name, p in params.items():
        key = prefix + name
        if key not in entries:
            if strict:
                raise CheckpointError(f"checkpoint is missing parameter {key!r}")
            continue
        e = entries[key]
        if e.data.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key!r}: {e.data.shape} vs {p.data.shape}")
        p.data[...] = e.data
        p.frozen = e.frozen
        p.mask = None if e.mask is None else e.mask.copy()
    for name, buf in module.named_buffers():
        key = prefix + name
        if key in entries:
            buf[...] = entries[key].data
        elif strict:
            raise CheckpointError(f"checkpoint is missing buffer {key!r}")


def parameter_entry(p: Parameter) -> Entry:
    return Entry(p.data.copy(), "param", p.frozen, None if p.mask is None else p.mask.copy())

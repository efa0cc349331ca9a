"""Single-file binary checkpoints holding a model, its domain bank and provenance.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"ADABNCKP"
    8       4     u32 format version (currently 1)
    12      8     u64 header length H
    20      H     UTF-8 JSON header (architecture, provenance, tensor index)
    20+H    ...   tensor blocks in header index order, each:
                    u32 ndim, ndim * u64 extents, prod(extents) * f64

The tensor index lists ``{"kind", "name", "shape"}`` records, plus ``domain``
and ``count`` for bank entries. See docs/FORMATS.md for the full description.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .engine import BnStats, BnStatsBank
from .errors import FormatError, ShapeMismatchError, TruncatedFileError, UnsupportedVersionError, ValidationError
from .layers import BatchNorm, Model

MAGIC = b"ADABNCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model: Model
    bank: BnStatsBank = field(default_factory=BnStatsBank)
    provenance: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _tensor_records(ckpt: Checkpoint) -> list[tuple[dict[str, Any], np.ndarray]]:
    out = []
    for layer in ckpt.model.layers:
        for key, arr in layer.params.items():
            out.append(({"kind": "param", "name": f"{layer.name}.{key}"}, arr))
        for key, arr in layer.buffers().items():
            out.append(({"kind": "buffer", "name": f"{layer.name}.{key}"}, arr))
    for (layer, domain), stats in ckpt.bank.items():
        meta = {"name": layer, "domain": domain, "count": int(stats.count)}
        out.append(({"kind": "bank_mean", **meta}, stats.mean))
        out.append(({"kind": "bank_var", **meta}, stats.var))
    for meta, arr in out:
        meta["shape"] = list(arr.shape)
    return out


def _header_bytes(ckpt: Checkpoint, records) -> bytes:
    header = {
        "architecture": ckpt.model.describe(),
        "provenance": ckpt.provenance,
        "tensors": [meta for meta, _ in records],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    records = _tensor_records(ckpt)
    header = _header_bytes(ckpt, records)
    parts = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for _, arr in records:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save(ckpt: Checkpoint, path: str | Path, overwrite: bool = False) -> None:
    """Write ``ckpt`` atomically; refuses to replace an existing file unless ``overwrite``."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} already exists (use overwrite=True)")
    data = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc


def read_header(buf: bytes, path: str | Path = "<bytes>") -> tuple[dict[str, Any], int]:
    if len(buf) < _PREFIX.size:
        raise TruncatedFileError(path, _PREFIX.size, len(buf))
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint format version {version}, "
                                      f"this reader supports {FORMAT_VERSION}")
    end = _PREFIX.size + hlen
    if len(buf) < end:
        raise TruncatedFileError(path, end, len(buf))
    try:
        header = json.loads(buf[_PREFIX.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from None
    return header, end


def _expected_size(header: dict[str, Any], start: int) -> int:
    total = start
    for meta in header["tensors"]:
        shape = meta["shape"]
        total += 4 + 8 * len(shape) + 8 * int(np.prod(shape, dtype=np.int64))
    return total


def from_bytes(buf: bytes, path: str | Path = "<bytes>") -> Checkpoint:
    header, pos = read_header(buf, path)
    expected = _expected_size(header, pos)
    if len(buf) < expected:
        raise TruncatedFileError(path, expected, len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} unexpected trailing bytes")

    tensors = []
    for meta in header["tensors"]:
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = list(struct.unpack_from(f"<{ndim}Q", buf, pos))
        pos += 8 * ndim
        if shape != meta["shape"]:
            raise ShapeMismatchError(f"{path}: tensor {meta['name']} block shape {shape} != index {meta['shape']}")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        tensors.append((meta, arr))

    # build everything before returning so a bad file never yields partial state
    try:
        model = Model.from_descriptor(header["architecture"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad architecture descriptor: {exc}") from None
    params = {f"{layer.name}.{k}": (layer, k) for layer in model.layers for k in layer.params}
    buffers = {f"{layer.name}.{k}": layer for layer in model.layers for k in layer.buffers()}
    seen = set()
    bank_parts: dict[tuple[str, str], dict[str, Any]] = {}
    for meta, arr in tensors:
        kind, name = meta["kind"], meta["name"]
        if kind == "param":
            if name not in params:
                raise ShapeMismatchError(f"{path}: parameter {name} not in architecture")
            layer, key = params[name]
            if layer.params[key].shape != arr.shape:
                raise ShapeMismatchError(f"{path}: parameter {name} has shape {arr.shape}, "
                                         f"architecture needs {layer.params[key].shape}")
            layer.params[key] = arr
            seen.add(name)
        elif kind == "buffer":
            layer = buffers.get(name)
            if layer is None:
                raise ShapeMismatchError(f"{path}: buffer {name} not in architecture")
            attr = name.rsplit(".", 1)[1]
            if getattr(layer, attr).shape != arr.shape:
                raise ShapeMismatchError(f"{path}: buffer {name} has shape {arr.shape}")
            if attr == "running_var" and np.any(arr < 0):
                raise ValidationError(f"{path}: {name} has negative entries")
            setattr(layer, attr, arr)
            seen.add(name)
        elif kind in ("bank_mean", "bank_var"):
            entry = bank_parts.setdefault((name, meta["domain"]), {"count": int(meta["count"])})
            entry[kind] = arr
        else:
            raise FormatError(f"{path}: unknown tensor kind {kind!r}")
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise ShapeMismatchError(f"{path}: missing tensors {sorted(missing)}")

    widths = {bn.name: bn.num_features for bn in model.layers if isinstance(bn, BatchNorm)}
    bank = BnStatsBank()
    for (layer, domain), entry in bank_parts.items():
        if "bank_mean" not in entry or "bank_var" not in entry:
            raise FormatError(f"{path}: incomplete bank entry {layer}/{domain}")
        mean, var = entry["bank_mean"], entry["bank_var"]
        if layer not in widths:
            raise ShapeMismatchError(f"{path}: bank entry for unknown BN layer {layer!r}")
        if mean.shape != (widths[layer],) or var.shape != (widths[layer],):
            raise ShapeMismatchError(f"{path}: bank entry {layer}/{domain} has wrong length")
        if np.any(var < 0):
            raise ValidationError(f"{path}: bank entry {layer}/{domain} has negative variance")
        if entry["count"] < 0:
            raise ValidationError(f"{path}: bank entry {layer}/{domain} has negative count")
        bank.put(layer, domain, BnStats(mean, var, entry["count"]))
    return Checkpoint(model, bank, header.get("provenance", {}), FORMAT_VERSION)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf, path)


def describe(path: str | Path) -> str:
    """Human-readable dump of a checkpoint header."""
    buf = Path(path).read_bytes()
    header, start = read_header(buf, path)
    lines = [f"file: {path}", f"format_version: {FORMAT_VERSION}", f"header_bytes: {start - _PREFIX.size}",
             f"total_bytes: {len(buf)} (expected {_expected_size(header, start)})",
             f"input_shape: {header['architecture']['input_shape']}", "layers:"]
    for layer in header["architecture"]["layers"]:
        extra = ", ".join(f"{k}={v}" for k, v in layer.items() if k not in ("kind", "name"))
        lines.append(f"  {layer['name']:<10} {layer['kind']:<10} {extra}")
    lines.append("tensors:")
    for meta in header["tensors"]:
        where = f"{meta['name']}@{meta['domain']} (count {meta['count']})" if "domain" in meta else meta["name"]
        lines.append(f"  {meta['kind']:<10} {where:<32} shape={meta['shape']}")
    lines.append("provenance:")
    for k, v in sorted(header.get("provenance", {}).items()):
        lines.append(f"  {k}: {v}")
    return "\n".join(lines) + "\n"


def tensor_map(ckpt: Checkpoint) -> dict[str, bytes]:
    """Tensor identity -> raw little-endian bytes, for structural comparison."""
    out = {}
    for meta, arr in _tensor_records(ckpt):
        key = meta["kind"] + ":" + meta["name"] + (f"@{meta['domain']}" if "domain" in meta else "")
        out[key] = struct.pack(f"<{arr.ndim}Q", *arr.shape) + np.ascontiguousarray(arr, "<f8").tobytes()
        if "count" in meta:
            out[key] += struct.pack("<q", meta["count"])
    return out


def diff_checkpoints(a: Checkpoint, b: Checkpoint) -> list[str]:
    """Keys whose content differs between two checkpoints (architecture and provenance included)."""
    diffs = []
    if a.model.describe() != b.model.describe():
        diffs.append("architecture")
    if a.provenance != b.provenance:
        diffs.append("provenance")
    ta, tb = tensor_map(a), tensor_map(b)
    for key in sorted(set(ta) | set(tb)):
        if ta.get(key) != tb.get(key):
            diffs.append(key)
    return diffs

"""Synthetic multi-domain datasets with controllable covariate shift."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DimensionError, FormatError, PreconditionError, TruncatedFileError, UnsupportedVersionError


@dataclass
class DomainDataset:
    domain_id: str
    inputs: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = 0

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim < 2 or self.inputs.shape[0] < 1:
            raise PreconditionError("a dataset needs at least one sample and a feature axis")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.inputs.shape[0],):
                raise DimensionError(f"labels shape {self.labels.shape} does not match {self.inputs.shape[0]} samples")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise PreconditionError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return DomainDataset(self.domain_id, self.inputs[idx], labels, self.class_count)

    def relabel(self, domain_id: str) -> "DomainDataset":
        return replace(self, domain_id=domain_id)

    def unlabeled(self) -> "DomainDataset":
        return DomainDataset(self.domain_id, self.inputs, None, self.class_count)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                drop_last: bool = False) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        """Mini-batches drawn from this dataset only; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i:i + batch_size]
            if drop_last and len(idx) < batch_size:
                break
            yield self.inputs[idx], (None if self.labels is None else self.labels[idx])


def concat(datasets: list[DomainDataset], domain_id: str) -> DomainDataset:
    labels = None
    if all(d.labeled for d in datasets):
        labels = np.concatenate([d.labels for d in datasets])
    return DomainDataset(domain_id, np.concatenate([d.inputs for d in datasets]), labels,
                         max(d.class_count for d in datasets))


def make_blobs(class_count: int, per_class: int, dim: int, separation: float, seed: int,
               domain_id: str = "source") -> DomainDataset:
    """Unit-variance Gaussian clusters whose centres are pairwise ``separation`` apart.

    When ``dim >= class_count`` the centres are a randomly rotated scaled simplex,
    so every pair of classes is exactly ``separation`` apart.
    """
    if min(class_count, per_class, dim) < 1 or separation <= 0:
        raise PreconditionError("class_count, per_class, dim and separation must be positive")
    rng = np.random.default_rng(seed)
    if dim >= class_count:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        centres = (separation / np.sqrt(2.0)) * q[:, :class_count].T
        centres -= centres.mean(axis=0)
    else:
        centres = rng.normal(size=(class_count, dim))
        centres *= separation / max(np.linalg.norm(centres[0] - centres[-1]), 1e-12)
    labels = np.repeat(np.arange(class_count), per_class)
    inputs = centres[labels] + rng.normal(size=(class_count * per_class, dim))
    perm = rng.permutation(len(labels))
    return DomainDataset(domain_id, inputs[perm], labels[perm], class_count)


# 5x7 bitmaps, one string per row
_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
]


def _glyph(digit: int, size: int) -> np.ndarray:
    bits = np.array([[c == "1" for c in row] for row in _GLYPHS[digit]], dtype=np.float64)
    # nearest-neighbour upscale into a (size-2) box, leaving room for jitter
    box = size - 2
    rows = (np.arange(box) * 7 // box)
    cols = (np.arange(box) * 5 // box)
    return bits[np.ix_(rows, cols)]


def make_digits_grid(per_class: int, image_size: int, seed: int, domain_id: str = "source",
                     noise: float = 0.05) -> DomainDataset:
    """Rendered 10-class digit glyphs with random ±1 pixel shifts, intensity and noise."""
    if image_size < 8:
        raise PreconditionError("image_size must be at least 8")
    if per_class < 1:
        raise PreconditionError("per_class must be positive")
    rng = np.random.default_rng(seed)
    n = 10 * per_class
    images = np.zeros((n, 1, image_size, image_size))
    labels = np.repeat(np.arange(10), per_class)
    glyphs = [_glyph(d, image_size) for d in range(10)]
    box = image_size - 2
    for i, d in enumerate(labels):
        dy, dx = rng.integers(0, 3, size=2)
        images[i, 0, dy:dy + box, dx:dx + box] = glyphs[d] * rng.uniform(0.7, 1.0)
    images += rng.normal(0.0, noise, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    perm = rng.permutation(n)
    return DomainDataset(domain_id, images[perm], labels[perm], 10)


@dataclass
class ShiftSpec:
    """Affine covariate shift ``x' = scale * R(x) + shift + noise``.

    ``input_shift`` and ``input_scale`` are scalars, per-feature arrays of the
    sample shape, or (for image data) per-channel vectors. ``rotation_angle``
    rotates the plane of the first two features of vector data.
    """

    input_shift: float | np.ndarray = 0.0
    input_scale: float | np.ndarray = 1.0
    rotation_angle: float | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if np.any(np.asarray(self.input_scale) <= 0):
            raise PreconditionError("input_scale must be strictly positive")
        if self.noise_sigma < 0:
            raise PreconditionError("noise_sigma must be nonnegative")


def _broadcast_to_sample(v, sample_shape: tuple[int, ...], what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape == sample_shape:
        return v
    if len(sample_shape) == 3 and v.shape == (sample_shape[0],):
        return v[:, None, None]
    raise DimensionError(f"{what} of shape {v.shape} does not fit samples of shape {sample_shape}")


def shift_domain(src: DomainDataset, spec: ShiftSpec, new_domain_id: str) -> DomainDataset:
    """Apply a label-preserving affine shift to the inputs of ``src``."""
    shape = src.sample_shape
    shift = _broadcast_to_sample(spec.input_shift, shape, "input_shift")
    scale = _broadcast_to_sample(spec.input_scale, shape, "input_scale")
    x = src.inputs
    if spec.rotation_angle is not None:
        if len(shape) != 1 or shape[0] < 2:
            raise DimensionError("rotation needs vector samples with at least two features")
        c, s = np.cos(spec.rotation_angle), np.sin(spec.rotation_angle)
        x = x.copy()
        a, b = x[:, 0].copy(), x[:, 1].copy()
        x[:, 0] = c * a - s * b
        x[:, 1] = s * a + c * b
    x = scale * x + shift
    if spec.noise_sigma > 0:
        x = x + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, size=x.shape)
    labels = None if src.labels is None else src.labels.copy()
    return DomainDataset(new_domain_id, x, labels, src.class_count)


def class_conditional_shift(src: DomainDataset, shifts: np.ndarray, new_domain_id: str) -> DomainDataset:
    """Shift each class by its own offset (row ``c`` of ``shifts``).

    Not a pure covariate shift: per-feature standardization cannot undo it, so
    it serves as the case where statistic replacement helps little.
    """
    if src.labels is None:
        raise PreconditionError("class-conditional shift needs labels")
    shifts = np.asarray(shifts, dtype=np.float64)
    if shifts.shape != (src.class_count, *src.sample_shape):
        raise DimensionError(f"shifts must have shape {(src.class_count, *src.sample_shape)}, got {shifts.shape}")
    return DomainDataset(new_domain_id, src.inputs + shifts[src.labels], src.labels.copy(), src.class_count)


# --- file format -----------------------------------------------------------

DATASET_MAGIC = b"ADBNDSET"
DATASET_VERSION = 1


def save_dataset(ds: DomainDataset, path: str | Path, overwrite: bool = False) -> None:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; pass overwrite=True to replace it")
    name = ds.domain_id.encode("utf-8")
    parts = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION), struct.pack("<I", len(name)), name,
             struct.pack("<I", ds.class_count), struct.pack("<I", ds.inputs.ndim),
             struct.pack(f"<{ds.inputs.ndim}Q", *ds.inputs.shape),
             ds.inputs.astype("<f8").tobytes()]
    if ds.labels is None:
        parts.append(b"\x00")
    else:
        parts += [b"\x01", ds.labels.astype("<i8").tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_dataset(path: str | Path) -> DomainDataset:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(path, pos + n, len(buf))
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(8) != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != DATASET_VERSION:
        raise UnsupportedVersionError(f"{path}: dataset format version {version}, reader supports {DATASET_VERSION}")
    (name_len,) = struct.unpack("<I", take(4))
    domain_id = take(name_len).decode("utf-8")
    class_count, ndim = struct.unpack("<II", take(8))
    shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
    count = int(np.prod(shape))
    inputs = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    labels = None
    if take(1) == b"\x01":
        labels = np.frombuffer(take(8 * shape[0]), dtype="<i8").astype(np.int64)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return DomainDataset(domain_id, inputs, labels, class_count)


def export_csv(ds: DomainDataset, path: str | Path) -> None:
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain_id", "label"] + [f"x{i}" for i in range(flat.shape[1])])
        for i, row in enumerate(flat):
            label = "" if ds.labels is None else int(ds.labels[i])
            writer.writerow([ds.domain_id, label] + [repr(float(v)) for v in row])

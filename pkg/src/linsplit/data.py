"""Datasets: the 3-D synthetic task, IDX/CSV image files, holdout splits."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .seeding import stream

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        n = len(self.labels)
        if n < 1:
            raise DataError(f"{self.name}: dataset is empty")
        if self.inputs.shape[0] != n:
            raise DataError(f"{self.name}: {self.inputs.shape[0]} inputs but {n} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"{self.name}: labels outside [0, {self.num_classes})")
        self.inputs.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(self.inputs[idx].copy(), self.labels[idx].copy(),
                       name or self.name, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    samples_per_class: int = 200
    noise: float = 0.1
    seed: int = 0
    separation: float = 2.0

    def validate(self) -> None:
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.separation <= 0:
            raise ConfigError(f"separation must be > 0, got {self.separation}")


def generate_synthetic_3d(spec: SyntheticSpec) -> Dataset:
    """Two classes whose (x, y) come from the same noisy unit ring, split along z.

    Class 0 sits at ``z = +separation/2``, class 1 at ``-separation/2``.
    """
    spec.validate()
    rng = stream(spec.seed, "synth-data")
    n = spec.samples_per_class
    parts = []
    for cls, centre in ((0, spec.separation / 2), (1, -spec.separation / 2)):
        angle = rng.uniform(0.0, 2 * np.pi, n)
        xy = np.stack([np.cos(angle), np.sin(angle)], axis=1) + spec.noise * rng.standard_normal((n, 2))
        z = centre + spec.noise * rng.standard_normal(n)
        parts.append(np.column_stack([xy, z]))
    labels = np.repeat(np.arange(2), n)
    return Dataset(np.concatenate(parts), labels, "synthetic-3d", 2)


# ----------------------------------------------------------------------- IDX

def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise FormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    size = int(np.prod(dims))
    if len(blob) != head + size:
        raise FormatError(f"{path}: expected {size} data bytes, found {len(blob) - head}")
    return dims, blob[head:]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled to [0, 1]."""
    (n, rows, cols), pix = _read_idx(images_path, IDX_IMAGES)
    (m,), lab = _read_idx(labels_path, IDX_LABELS)
    if n != m:
        raise DataError(f"{images_path} has {n} images but {labels_path} has {m} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    k = num_classes or int(labels.max()) + 1
    return Dataset(images, labels, Path(images_path).name, max(k, 2))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N×H×W) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS, len(labels)) + labels.tobytes())


# ----------------------------------------------------------------------- CSV

def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, width: int, height: int, channels: int = 1,
             num_classes: int | None = None) -> Dataset:
    """Rows of ``label, p_0 .. p_{C·H·W-1}`` in channel-major order.

    A non-numeric first row is treated as a header.  Pixel values above 1 are
    taken as bytes and divided by 255.
    """
    path = Path(path)
    want = width * height * channels
    labels, rows = [], []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if len(row) != want + 1:
                raise FormatError(f"{path}:{lineno}: expected {want + 1} fields, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if vals[0] != int(vals[0]):
                raise FormatError(f"{path}:{lineno}: label {row[0]!r} is not an integer")
            labels.append(int(vals[0]))
            rows.append(vals[1:])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    if x.max() > 1.0:
        x = x / 255.0
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise DataError(f"{path}: negative label")
    k = num_classes or int(y.max()) + 1
    return Dataset(x.reshape(len(y), channels, height, width), y, path.name, max(k, 2))


def split_holdout(data: Dataset, k: int, seed: int = 0) -> tuple[Dataset, Dataset | None]:
    """Seeded permutation split into (train, holdout) with ``len(holdout) == k``.

    ``k == 0`` returns the permuted data and ``None``.
    """
    n = len(data)
    if not 0 <= k < n:
        raise ConfigError(f"holdout size {k} must lie in [0, {n})")
    perm = stream(seed, "holdout").permutation(n)
    train = data.subset(perm[k:], data.name + ":train")
    hold = data.subset(perm[:k], data.name + ":holdout") if k else None
    return train, hold


# ------------------------------------------------------ procedural image set

_SEGMENTS = {  # seven-segment layout: a b c d e f g
    0: "abcdef", 1: "bc", 2: "abdeg", 3: "abcdg", 4: "bcfg",
    5: "acdfg", 6: "acdefg", 7: "abc", 8: "abcdefg", 9: "abcdfg",
}


def _segment_box(seg: str, top: int, left: int, h: int, w: int, t: int):
    mid = top + h // 2
    return {
        "a": (top, top + t, left, left + w),
        "d": (top + h - t, top + h, left, left + w),
        "g": (mid - t // 2, mid - t // 2 + t, left, left + w),
        "f": (top, mid + 1, left, left + t),
        "b": (top, mid + 1, left + w - t, left + w),
        "e": (mid, top + h, left, left + t),
        "c": (mid, top + h, left + w - t, left + w),
    }[seg]


def make_segment_digits(n: int, size: int = 16, seed: int = 0, noise: float = 0.2,
                        drop: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Noisy seven-segment digits as uint8 images (N×size×size) and labels.

    Each sample jitters glyph position, height, width and stroke thickness,
    randomly drops one segment with probability ``drop``, scales contrast and
    adds Gaussian pixel noise.
    """
    rng = stream(seed, "segment-digits")
    labels = rng.integers(0, 10, n)
    images = np.zeros((n, size, size))
    for idx, digit in enumerate(labels):
        h = rng.integers(size * 5 // 8, size * 7 // 8 + 1)
        w = rng.integers(size * 3 // 8, size // 2 + 1)
        t = rng.integers(1, 3)
        # roughly centred, as in scanned digit sets, with a couple of pixels of jitter
        top = int(np.clip((size - h) // 2 + rng.integers(-2, 3), 0, size - h))
        left = int(np.clip((size - w) // 2 + rng.integers(-2, 3), 0, size - w))
        segs = list(_SEGMENTS[int(digit)])
        if len(segs) > 2 and rng.random() < drop:
            segs.pop(rng.integers(len(segs)))
        img = np.zeros((size, size))
        for seg in segs:
            r0, r1, c0, c1 = _segment_box(seg, top, left, h, w, t)
            img[r0:r1, c0:c1] = 1.0
        img = img * rng.uniform(0.5, 1.0) + noise * rng.standard_normal((size, size))
        images[idx] = img
    return (np.clip(images, 0.0, 1.0) * 255).round().astype(np.uint8), labels.astype(np.uint8)

"""Volume files, dataset directories, and the synthetic stand-in dataset.

Volumes are stored in a minimal bit-exact format (SPV): a 4-byte magic "SPV1",
a dtype code byte (0 = f32, 1 = u8), a dimension-count byte, little-endian u32
extents, then the raw row-major payload (last axis fastest).  No compression,
little-endian only.

A dataset directory holds pairs ``<id>.img.spv`` (f32 intensity) and
``<id>.seg.spv`` (u8 labels 0=background, 1=liver, 2=tumor) plus a manifest
``manifest.tsv`` of ``id<TAB>split`` lines.

The synthetic generator emits desk-scale liver-like records: noisy background,
one bright ellipsoidal "liver", and 1-3 brighter "tumor" spheres embedded in
it, deterministic per seed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DtypeCodeError,
    LabelRangeError,
    SpvFormatError,
    TruncatedPayloadError,
)

MAGIC = b"SPV1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


@dataclass
class VolumeRecord:
    """An intensity volume plus matching labels (0 background, 1 liver, 2 tumor)."""

    image: np.ndarray
    labels: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise SpvFormatError(
                f"{self.id}: image shape {self.image.shape} != labels {self.labels.shape}"
            )
        if self.image.dtype != np.float32:
            raise SpvFormatError(f"{self.id}: image dtype must be f32, got {self.image.dtype}")
        if self.labels.dtype != np.uint8:
            raise SpvFormatError(f"{self.id}: labels dtype must be u8, got {self.labels.dtype}")
        if self.labels.max(initial=0) > 2:
            raise LabelRangeError(f"{self.id}: labels outside {{0,1,2}}")

    def copy(self):
        return VolumeRecord(self.image.copy(), self.labels.copy(), self.id)


def write_spv(path, arr):
    arr = np.asarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise DtypeCodeError(f"cannot store dtype {arr.dtype}; only f32 and u8")
    header = MAGIC + struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        payload = payload.astype("<f4", copy=False)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_spv(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 6:
        raise TruncatedPayloadError(f"{path}: truncated header")
    code, ndim = struct.unpack("<BB", raw[4:6])
    if code not in _DTYPE_CODES:
        raise DtypeCodeError(f"{path}: unknown dtype code {code}")
    off = 6 + 4 * ndim
    if len(raw) < off:
        raise TruncatedPayloadError(f"{path}: truncated extents")
    extents = struct.unpack(f"<{ndim}I", raw[6:off])
    dtype = _DTYPE_CODES[code]
    n = int(np.prod(extents)) * dtype.itemsize
    if len(raw) - off < n:
        raise TruncatedPayloadError(
            f"{path}: payload is {len(raw) - off} bytes, header promises {n}"
        )
    arr = np.frombuffer(raw[off : off + n], dtype=dtype).reshape(extents)
    if dtype == np.dtype("<f4"):
        arr = arr.astype(np.float32, copy=False)
    return arr.copy()  # frombuffer views are read-only; hand back an owned array


def write_record(root, rec):
    root = Path(root)
    write_spv(root / f"{rec.id}.img.spv", rec.image)
    write_spv(root / f"{rec.id}.seg.spv", rec.labels)


def read_record(root, rec_id):
    root = Path(root)
    image = read_spv(root / f"{rec_id}.img.spv")
    labels = read_spv(root / f"{rec_id}.seg.spv")
    if labels.dtype != np.uint8:
        raise DtypeCodeError(f"{rec_id}: segmentation must be u8, got {labels.dtype}")
    if labels.max(initial=0) > 2:
        raise LabelRangeError(f"{rec_id}: labels outside {{0,1,2}}")
    if image.shape != labels.shape:
        raise SpvFormatError(
            f"{rec_id}: image {image.shape} and segmentation {labels.shape} extents differ"
        )
    return VolumeRecord(image, labels, rec_id)


class DatasetDir:
    """A directory of record pairs plus a manifest of train/val splits."""

    def __init__(self, root):
        self.root = Path(root)
        self.splits = {}
        manifest = self.root / "manifest.tsv"
        if not manifest.exists():
            raise SpvFormatError(f"no manifest.tsv in {self.root}")
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            rec_id, _, split = line.partition("\t")
            self.splits[rec_id] = split.strip()

    def ids(self, split=None):
        if split is None:
            return sorted(self.splits)
        return sorted(i for i, s in self.splits.items() if s == split)

    def load(self, rec_id):
        return read_record(self.root, rec_id)

    def load_split(self, split):
        return [self.load(i) for i in self.ids(split)]


def write_manifest(root, splits):
    lines = [f"{i}\t{s}" for i, s in sorted(splits.items())]
    (Path(root) / "manifest.tsv").write_text("\n".join(lines) + "\n")


def _ellipsoid_mask(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, s) for s in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def synthesize_record(extent, rng, rec_id):
    """One liver-like record: noise background, +1.0 liver ellipsoid, +1.5 tumors."""
    shape = (extent,) * 3
    image = rng.normal(0.0, 0.1, shape)
    center = [extent / 2 + rng.uniform(-extent / 10, extent / 10) for _ in range(3)]
    radii = [rng.uniform(0.30, 0.40) * extent for _ in range(3)]
    liver = _ellipsoid_mask(shape, center, radii)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[liver] = 1
    image = image + 1.0 * liver

    liver_idx = np.argwhere(liver)
    n_tumors = int(rng.integers(1, 4))
    tumor = np.zeros(shape, dtype=bool)
    for _ in range(n_tumors):
        c = liver_idx[rng.integers(len(liver_idx))]
        r = rng.uniform(extent / 16, extent / 8)
        tumor |= _ellipsoid_mask(shape, c, (r, r, r))
    tumor &= liver  # tumors never leave the liver
    labels[tumor] = 2
    image = image + 1.5 * tumor
    return VolumeRecord(image.astype(np.float32), labels, rec_id)


def generate_synthetic_dataset(n, extent, seed, out_dir):
    """Write ``n`` deterministic records at ``extent``^3 with a ~75/25 split."""
    if extent < 4 or extent & (extent - 1):
        raise SpvFormatError(f"extent must be a power of two >= 4, got {extent}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train = round(0.75 * n)
    splits = {}
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        rec = synthesize_record(extent, rng, f"case{i:03d}")
        write_record(out, rec)
        splits[rec.id] = "train" if i < n_train else "val"
    write_manifest(out, splits)
    return DatasetDir(out)


def downsample2_record(rec):
    """Half-resolution copy: 2x2x2 mean over the image, strided labels."""
    z, y, x = rec.image.shape
    img = (
        rec.image.reshape(z // 2, 2, y // 2, 2, x // 2, 2)
        .mean(axis=(1, 3, 5))
        .astype(np.float32)
    )
    labels = np.ascontiguousarray(rec.labels[::2, ::2, ::2])
    return VolumeRecord(img, labels, rec.id)

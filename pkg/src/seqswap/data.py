"""Datasets: a planted-pattern synthetic task and an IDX-format loader.

Synthetic task: each class k owns a fixed binary patch-sized pattern (all
patterns share the same on-pixel count, so single-patch statistics cannot
leak the label). One sample plants its class pattern in a uniformly random
patch cell of an otherwise empty image and adds Gaussian noise, clipped to
[0, 1]. Locating the planted cell among the patch grid requires mixing
information across tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError


@dataclass
class SyntheticSpec:
    image_size: int = 28
    patch_size: int = 7
    n_classes: int = 10
    train_size: int = 512
    val_size: int = 256
    noise: float = 0.25
    on_fraction: float = 0.5
    seed: int = 0


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    # grid cell holding the planted pattern, for oracle checks; -1 if unknown
    train_cells: np.ndarray = field(default=None, repr=False)
    val_cells: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.train_x) == 0 or len(self.val_x) == 0:
            raise ContractError("empty dataset split")


def class_patterns(spec):
    """(K, p, p) binary patterns, pairwise distinct, equal on-pixel count."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    p = spec.patch_size
    n_on = int(round(spec.on_fraction * p * p))
    seen = set()
    out = np.zeros((spec.n_classes, p, p))
    for k in range(spec.n_classes):
        while True:
            cells = tuple(sorted(rng.choice(p * p, size=n_on, replace=False)))
            if cells not in seen:
                seen.add(cells)
                break
        flat = np.zeros(p * p)
        flat[list(cells)] = 1.0
        out[k] = flat.reshape(p, p)
    return out


def _generate_split(spec, patterns, rng, n):
    g = spec.image_size // spec.patch_size
    p = spec.patch_size
    labels = rng.integers(0, spec.n_classes, size=n)
    cells = rng.integers(0, g * g, size=n)
    x = np.zeros((n, spec.image_size, spec.image_size))
    for i in range(n):
        row, col = divmod(int(cells[i]), g)
        x[i, row * p:(row + 1) * p, col * p:(col + 1) * p] = patterns[labels[i]]
    x += spec.noise * rng.standard_normal(x.shape)
    return np.clip(x, 0.0, 1.0), labels.astype(np.int64), cells.astype(np.int64)


def make_synthetic(spec):
    if spec.image_size % spec.patch_size != 0:
        raise ContractError("image size not divisible by patch size")
    patterns = class_patterns(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    train_x, train_y, train_c = _generate_split(spec, patterns, rng, spec.train_size)
    val_x, val_y, val_c = _generate_split(spec, patterns, rng, spec.val_size)
    return Dataset(train_x, train_y, val_x, val_y, train_c, val_c)


# ---------------------------------------------------------------------------
# IDX format (the MNIST container): 2 zero bytes, dtype code, ndim, then
# big-endian u32 dims, then raw data.

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4",
               0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at offset 0")
    zeros, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zeros != 0:
        raise FormatError(f"{path}: bad IDX magic at offset 0 "
                          f"(expected two zero bytes, got {raw[0]:#04x} {raw[1]:#04x})")
    if dtype_code not in _IDX_DTYPES:
        raise FormatError(f"{path}: unknown IDX dtype code {dtype_code:#04x} at offset 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension list at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[dtype_code], offset=header_end)
    expected = int(np.prod(dims)) if dims else 0
    if data.size != expected:
        raise FormatError(f"{path}: payload holds {data.size} items at offset "
                          f"{header_end}, header declares {expected}")
    return data.reshape(dims).astype(np.float64)


def load_idx_pair(images_path, labels_path, n_classes, val_fraction=0.2, seed=0):
    """Load an IDX image/label pair and split train/val deterministically."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected 3-d image tensor, got {images.ndim}-d")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise FormatError("image and label counts disagree")
    observed = int(labels.max()) + 1
    if observed > n_classes:
        raise ContractError(f"labels span {observed} classes, config allows {n_classes}")
    images = images / 255.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    order = rng.permutation(images.shape[0])
    n_val = max(1, int(val_fraction * images.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return Dataset(images[train_idx], labels[train_idx],
                   images[val_idx], labels[val_idx])


def load_dataset(spec):
    """Dispatch on a spec mapping: {"kind": "synthetic", ...} or
    {"kind": "idx", "images": ..., "labels": ..., "n_classes": ...}."""
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic")
    if kind == "synthetic":
        return make_synthetic(SyntheticSpec(**spec))
    if kind == "idx":
        return load_idx_pair(spec["images"], spec["labels"],
                             n_classes=spec.get("n_classes", 10),
                             val_fraction=spec.get("val_fraction", 0.2),
                             seed=spec.get("seed", 0))
    raise ContractError(f"unknown dataset kind {kind!r}")

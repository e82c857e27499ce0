"""Synthetic image datasets, the CIFAR-10 binary format, and seeded batching."""

from __future__ import annotations

import hashlib
import math
import os
import re
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import DatasetError
from .tensor import Tensor

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 4
    train_per_class: int = 200
    test_per_class: int = 50
    channels: int = 3
    height: int = 16
    width: int = 16
    seed: int = 7
    family: str = "blobtex"
    shift: Tuple[int, int] = (0, 0)
    noise: float = 0.1

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar_binary"):
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if self.channels not in (1, 3):
            raise DatasetError(f"images must have 1 or 3 channels, got {self.channels}")
        if self.classes < 1 or self.height < 1 or self.width < 1:
            raise DatasetError("classes and image extents must be positive")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def to_string(self) -> str:
        s = (
            f"synth:{self.classes}:{self.channels}x{self.height}x{self.width}:"
            f"{self.train_per_class}:{self.test_per_class}:{self.seed}"
        )
        if self.shift != (0, 0):
            s += f":shift={self.shift[0]},{self.shift[1]}"
        return s


_SPEC_RE = re.compile(r"^synth:(\d+):(\d+)x(\d+)x(\d+):(\d+):(\d+):(\d+)(?::shift=(-?\d+),(-?\d+))?$")


def parse_spec(text: str) -> DatasetSpec:
    """Parse ``synth:<classes>:<c>x<h>x<w>:<n_train>:<n_test>:<seed>[:shift=<dx,dy>]`` (counts per class)."""
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise DatasetError(
            f"bad dataset spec {text!r}; expected synth:<classes>:<c>x<h>x<w>:<n_train>:<n_test>:<seed>[:shift=<dx,dy>]"
        )
    g = m.groups()
    shift = (int(g[7]), int(g[8])) if g[7] is not None else (0, 0)
    return DatasetSpec(
        "synthetic", int(g[0]), int(g[4]), int(g[5]), int(g[1]), int(g[2]), int(g[3]), int(g[6]), shift=shift
    )


@dataclass
class Split:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update(str(self.classes).encode())
        return h.hexdigest()


@dataclass
class ImageBatch:
    images: Tensor
    labels: np.ndarray


# --- synthetic generator ----------------------------------------------------------------------

# class k's colour; cycles for k >= len
_PALETTE = np.array(
    [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.2, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
        [1.0, 0.6, 0.2],
        [0.6, 0.2, 1.0],
    ]
)


def _grid(spec: DatasetSpec) -> int:
    return max(2, min(spec.height, spec.width) // 4)


def class_template(spec: DatasetSpec, k: int) -> dict:
    """Generator parameters of class ``k``; independent of the total class count."""
    g = _grid(spec)
    cells = g * g
    cell = (k * 7) % cells if math.gcd(7, cells) == 1 else k % cells
    gy, gx = divmod(cell, g)
    cy = (gy + 0.5) * spec.height / g + spec.shift[1]
    cx = (gx + 0.5) * spec.width / g + spec.shift[0]
    angle = (k % 4) * np.pi / 4
    freq = 0.25 if (k // 4) % 2 == 0 else 0.42
    return {"center": (cy, cx), "color": _PALETTE[k % len(_PALETTE)], "angle": angle, "freq": freq}


def _render(spec: DatasetSpec, k: int, n: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    t = class_template(spec, k)
    c, h, w = spec.image_shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sigma = max(h, w) / 8
    cy = t["center"][0] + rng.uniform(-2, 2, size=n)
    cx = t["center"][1] + rng.uniform(-2, 2, size=n)
    amp = rng.uniform(0.35, 0.6, size=n)
    blob = amp[:, None, None] * np.exp(
        -((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * sigma ** 2)
    )
    phase = rng.uniform(0, 2 * np.pi, size=n)
    u = xx * np.cos(t["angle"]) + yy * np.sin(t["angle"])
    tex = 0.08 * np.sin(2 * np.pi * t["freq"] * u[None] + phase[:, None, None])
    # a mild tint keeps colour from being a give-away cue
    color = 1.0 + 0.3 * (t["color"][:c] - 0.6) if c == 3 else np.array([1.0])
    brightness = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    img = (0.3 + blob[:, None] * color[None, :, None, None] + tex[:, None]) * brightness
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_generate(spec: DatasetSpec) -> Tuple[Split, Split]:
    """Deterministic (train, test) splits.

    Each class draws from its own seeded stream per split, so the first ``k``
    classes of a larger spec coincide with a ``k``-class spec of the same seed.
    """
    if spec.kind != "synthetic":
        raise DatasetError(f"synth_generate needs a synthetic spec, got {spec.kind!r}")
    cells = _grid(spec) ** 2
    if spec.classes > cells:
        raise DatasetError(f"{spec.classes} classes exceed the {cells} representable blob positions")
    splits = []
    for split_id, per_class in ((0, spec.train_per_class), (1, spec.test_per_class)):
        imgs, labels = [], []
        for k in range(spec.classes):
            rng = np.random.default_rng([spec.seed, split_id, k])
            imgs.append(_render(spec, k, per_class, rng, spec.noise))
            labels.append(np.full(per_class, k, dtype=np.int64))
        images = np.concatenate(imgs) if imgs else np.zeros((0,) + spec.image_shape, np.float32)
        splits.append(Split(images, np.concatenate(labels), spec.classes))
    return splits[0], splits[1]


def per_class_subset(split: Split, n: int) -> Split:
    """The first ``n`` samples of every class, in storage order."""
    keep = np.concatenate([np.nonzero(split.labels == k)[0][:n] for k in range(split.classes)])
    keep.sort()
    return Split(split.images[keep], split.labels[keep], split.classes)


def load(spec_or_text) -> Tuple[Split, Split]:
    spec = parse_spec(spec_or_text) if isinstance(spec_or_text, str) else spec_or_text
    return synth_generate(spec)


# --- CIFAR-10 binary -----------------------------------------------------------------------------


def read_cifar_records(path, classes: int = 10) -> Split:
    """Parse one CIFAR-10 binary file: records of 1 label byte + 3072 channel-planar pixel bytes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DatasetError(
            f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"partial record at offset {whole * CIFAR_RECORD}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label byte {labels[i]} > {classes - 1} in record {i} (offset {i * CIFAR_RECORD})")
    images = (rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0).astype(np.float32)
    return Split(images, labels, classes)


def load_cifar_binary(root, spec: Optional[DatasetSpec] = None) -> Tuple[Split, Split]:
    """Train/test splits from a directory holding the standard CIFAR-10 binary batch files."""
    classes = spec.classes if spec is not None else 10
    train_parts = [read_cifar_records(os.path.join(root, f), classes) for f in CIFAR_TRAIN_FILES
                   if os.path.exists(os.path.join(root, f))]
    if not train_parts:
        raise DatasetError(f"{root}: no data_batch_*.bin files")
    test = read_cifar_records(os.path.join(root, CIFAR_TEST_FILE), classes)
    train = Split(
        np.concatenate([p.images for p in train_parts]), np.concatenate([p.labels for p in train_parts]), classes
    )
    return train, test


# --- batching -------------------------------------------------------------------------------------


def batches(split: Split, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[ImageBatch]:
    """Mini-batches in a seed-determined order; the last partial batch is kept."""
    if batch_size < 1:
        raise DatasetError(f"batch size must be at least 1, got {batch_size}")
    n = len(split)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        idx = order[lo:lo + batch_size]
        yield ImageBatch(Tensor(split.images[idx]), split.labels[idx])

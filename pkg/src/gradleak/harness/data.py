"""Dataset ingestion: IDX files and synthetic Gaussian-blob images."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractError, ParseError
from ..smallnet import Sample
from ..tensorcore import SeededRng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_header(raw: bytes, expected_magic: int, ndim: int, what: str):
    if len(raw) < 4:
        raise ParseError(f"{what}: file too short for magic number", 0)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    if len(raw) < 4 + 4 * ndim:
        raise ParseError(f"{what}: truncated dimension header", len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    offset = 4 + 4 * ndim
    need = offset + math.prod(dims)
    if len(raw) < need:
        raise ParseError(f"{what}: truncated payload, expected {need} bytes", len(raw))
    return dims, offset


def read_idx_images(path) -> np.ndarray:
    """``(count, rows, cols)`` uint8 array from an IDX image file."""
    raw = Path(path).read_bytes()
    (count, rows, cols), off = _read_header(raw, IDX_IMAGES_MAGIC, 3, "images")
    return np.frombuffer(raw, np.uint8, count * rows * cols, off).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    (count,), off = _read_header(raw, IDX_LABELS_MAGIC, 1, "labels")
    return np.frombuffer(raw, np.uint8, count, off).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i averages input cells over output cell i's footprint (fractional overlap)."""
    edges_in = np.arange(n_in + 1, dtype=np.float64)
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    hi = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / (n_in / n_out)


def area_resize(img, size) -> np.ndarray:
    """Area-averaging resize of a 2-D image to ``(rows, cols)``; preserves the mean."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = size
    return _area_matrix(img.shape[0], rows) @ img @ _area_matrix(img.shape[1], cols).T


def center_crop(img, crop: int) -> np.ndarray:
    r0 = (img.shape[0] - crop) // 2
    c0 = (img.shape[1] - crop) // 2
    if r0 < 0 or c0 < 0:
        raise ContractError(f"crop {crop} larger than image {img.shape}")
    return img[r0 : r0 + crop, c0 : c0 + crop]


def load_idx(images_path, labels_path, limit=None, size=None, crop=None):
    """Samples from an IDX image/label pair, pixels scaled to [0, 1].

    ``crop`` center-crops to a square first; ``size=(rows, cols)``
    downsamples by area averaging.
    """
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    count = images.shape[0] if limit is None else min(limit, images.shape[0])
    out = []
    for img, lab in zip(images[:count], labels[:count]):
        x = img.astype(np.float64) / 255.0
        if crop is not None:
            x = center_crop(x, crop)
        if size is not None and tuple(size) != x.shape:
            x = np.clip(area_resize(x, size), 0.0, 1.0)
        out.append(Sample(x.ravel(), int(lab)))
    return out


@dataclass(frozen=True)
class SyntheticParams:
    """Class-conditioned Gaussian blobs.

    Each class owns a blob center (default: evenly spaced on a ring around
    the image center); pixels are ``exp(-|p - c|^2 / 2 sigma^2)`` plus
    Gaussian noise of standard deviation ``noise``, clamped to [0, 1].
    """

    count: int
    height: int = 8
    width: int = 8
    classes: int = 4
    sigma: float = 1.5
    noise: float = 0.1
    ring: float = 0.25
    centers: tuple | None = None

    def class_centers(self):
        if self.centers is not None:
            if len(self.centers) < self.classes:
                raise ContractError("need one blob center per class")
            return [tuple(map(float, c)) for c in self.centers[: self.classes]]
        cy, cx = (self.height - 1) / 2.0, (self.width - 1) / 2.0
        radius = self.ring * min(self.height, self.width)
        return [
            (cy + radius * math.sin(2 * math.pi * k / self.classes),
             cx + radius * math.cos(2 * math.pi * k / self.classes))
            for k in range(self.classes)
        ]


def blob_image(params: SyntheticParams, center) -> np.ndarray:
    rr, cc = np.mgrid[0 : params.height, 0 : params.width]
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return np.exp(-d2 / (2.0 * params.sigma**2)).ravel()


def gen_synthetic(params: SyntheticParams, rng: SeededRng, n_classes=None):
    if n_classes is not None and params.classes > n_classes:
        raise ContractError(f"{params.classes} synthetic classes exceed the {n_classes} model classes")
    if params.count < 0:
        raise ContractError("count must be non-negative")
    centers = params.class_centers()
    base = [blob_image(params, c) for c in centers]
    labels = rng.child(0).integers(0, params.classes, size=params.count)
    noise_rng = rng.child(1)
    out = []
    for y in labels:
        x = base[int(y)] + params.noise * noise_rng.normal(params.height * params.width)
        out.append(Sample(np.clip(x, 0.0, 1.0), int(y)))
    return out

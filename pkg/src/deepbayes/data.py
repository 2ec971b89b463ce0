"""Datasets: two-rings sampler, IDX images, binary subsets, feature files."""
import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bundle import read_bundle, write_bundle

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise DataFormatError(f"inputs must be N x D, got shape {self.inputs.shape}")
        if self.inputs.shape[0] == 0:
            raise DataFormatError("empty dataset")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataFormatError(f"{self.labels.shape[0]} labels for {self.inputs.shape[0]} rows")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataFormatError(f"labels outside [0, {self.class_count})")
        if not np.all(np.isfinite(self.inputs)):
            raise DataFormatError("non-finite input values")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)

    def take(self, idx):
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.provenance)


@dataclass
class FeatureDataset(Dataset):
    source: str = ""


def sample_two_rings(spec, n_per_class, rng):
    """Exactly ``n_per_class`` noisy ring points per class, classes in order."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not spec.noise_var >= 0:
        raise ValueError("noise variance must be non-negative")
    xs, ys = [], []
    sigma = math.sqrt(spec.noise_var)
    for c in range(spec.num_classes):
        theta = 2.0 * math.pi * rng.uniform((n_per_class,))
        eps = rng.normal((n_per_class, 2))
        ring = np.stack([np.cos(theta), np.sin(theta)], axis=1) * spec.radii[c]
        xs.append(np.asarray(spec.centers[c]) + ring + sigma * eps)
        ys.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), spec.num_classes, "two-rings")


def normalize_to_box(dataset, lo, hi):
    """Affine map of ``[lo, hi]`` onto ``[0, 1]``, clipped."""
    x = np.clip((dataset.inputs - lo) / (hi - lo), 0.0, 1.0)
    return Dataset(x, dataset.labels, dataset.class_count, dataset.provenance)


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataFormatError(f"{path}: truncated payload (wanted {n} bytes, got {len(buf)})")
    return buf


def _read_idx(path, magic):
    path = Path(path)
    with open(path, "rb") as fh:
        (got,) = struct.unpack(">I", _read_exact(fh, 4, path))
        if got != magic:
            raise DataFormatError(f"{path}: bad magic, expected 0x{magic:08x}, got 0x{got:08x}")
        ndim = magic & 0xFF
        dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, path))
        n = int(np.prod(dims, dtype=np.int64))
        payload = _read_exact(fh, n, path)
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(image_path, label_path, class_count=10):
    """Parse an IDX image/label pair; pixels scaled to ``[0, 1]``."""
    images = _read_idx(image_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(label_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), class_count, f"idx:{Path(image_path).name}")


def write_idx(image_path, label_path, images, labels):
    """Write uint8 ``images`` (N, rows, cols) and ``labels`` (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def subset_binary(dataset, class_a, class_b):
    """Keep classes ``a`` and ``b`` (relabelled 0 and 1) in original order."""
    keep = (dataset.labels == class_a) | (dataset.labels == class_b)
    if not keep.any():
        raise DataFormatError(f"no rows with labels {class_a} or {class_b}")
    labels = np.where(dataset.labels[keep] == class_a, 0, 1)
    prov = f"{dataset.provenance}[{class_a},{class_b}]"
    return Dataset(dataset.inputs[keep], labels, 2, prov)


def write_feature_vectors(stem, dataset, source=""):
    meta = {"kind": "features", "class_count": int(dataset.class_count), "source": source}
    return write_bundle(stem, meta, {"features": dataset.inputs, "labels": dataset.labels.astype(np.float64)})


def load_feature_vectors(stem):
    """Feature rows and labels from a manifest+blob file; no normalisation."""
    manifest, arrays = read_bundle(stem)
    if "labels" not in arrays:
        raise DataFormatError(f"{stem}: missing labels section")
    if "features" not in arrays:
        raise DataFormatError(f"{stem}: missing features section")
    feats, labels = arrays["features"], arrays["labels"]
    if feats.ndim != 2:
        raise DataFormatError(f"{stem}: features must be 2-D, got shape {feats.shape}")
    if labels.shape != (feats.shape[0],):
        raise DataFormatError(f"{stem}: {labels.shape} labels for {feats.shape[0]} feature rows")
    if np.any(labels != np.round(labels)):
        raise DataFormatError(f"{stem}: non-integer labels")
    C = int(manifest.get("class_count", int(labels.max()) + 1))
    return FeatureDataset(feats, labels.astype(np.int64), C, "features", source=manifest.get("source", ""))


def export_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])

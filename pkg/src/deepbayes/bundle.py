"""Manifest + blob storage for named float64 arrays.

A bundle ``stem`` is two files: ``stem.json`` (metadata plus the ordered
list of array names and shapes) and ``stem.bin`` (every array as
little-endian float64, concatenated in manifest order).
"""
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_LE = np.dtype("<f8")


class BundleError(ValueError):
    pass


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def write_bundle(stem, meta, arrays):
    """Write ``arrays`` (name -> array) with ``meta`` into a bundle; returns the manifest path."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype=_LE)
            entries.append({"name": name, "shape": list(a.shape)})
            fh.write(a.tobytes())
    manifest = {"format_version": FORMAT_VERSION, **meta, "arrays": entries}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_manifest(stem):
    manifest_path, _ = _paths(stem)
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as err:
        raise BundleError(f"{manifest_path}: malformed manifest ({err})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}")
    return manifest


def read_bundle(stem):
    """Return ``(manifest, {name: array})``."""
    manifest = read_manifest(stem)
    _, blob_path = _paths(stem)
    if not blob_path.exists():
        raise FileNotFoundError(blob_path)
    raw = np.frombuffer(blob_path.read_bytes(), dtype=_LE)
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        if offset + n > raw.size:
            raise BundleError(f"{blob_path}: truncated blob at array {entry['name']!r}")
        arrays[entry["name"]] = raw[offset : offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != raw.size:
        raise BundleError(f"{blob_path}: {raw.size - offset} trailing values")
    return manifest, arrays


def update_manifest(stem, **sections):
    """Add or replace top-level JSON sections without touching the blob."""
    manifest_path, _ = _paths(stem)
    manifest = read_manifest(stem)
    manifest.update(sections)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest

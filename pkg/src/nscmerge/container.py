"""Directory container for named float64 tensors.

Layout::

    <dir>/manifest     JSON document (UTF-8)
    <dir>/tensors.bin  little-endian float64, row-major, manifest order

Every tensor entry in the manifest carries ``name``, ``shape``, ``dtype``
("f64"), ``byte_offset`` and ``byte_length``. Tensors are packed back to back
starting at offset 0.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST = "manifest"
BLOB = "tensors.bin"
FORMAT = "nscmerge-tensors/1"
_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    """Base class for unreadable or inconsistent containers."""


class ManifestError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class TruncatedBlobError(ContainerError):
    pass


class TensorCountError(ContainerError):
    pass


def save_tensors(path, tensors: Mapping[str, np.ndarray], metadata: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float64:
            raise TypeError(f"tensor {name!r} has dtype {arr.dtype}, expected float64")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f64",
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "metadata": dict(metadata or {}),
        "tensor_count": len(entries),
        "tensors": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (path / BLOB).write_bytes(b"".join(chunks))
    return path


def _read_manifest(path: Path) -> dict:
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ManifestError(f"no manifest in {path}") from exc
    except UnicodeDecodeError as exc:
        raise ManifestError(f"manifest in {path} is not UTF-8") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest in {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ManifestError(f"manifest in {path} has unknown format")
    entries = doc.get("tensors")
    if not isinstance(entries, list):
        raise ManifestError("manifest is missing the tensor list")
    if doc.get("tensor_count") != len(entries):
        raise TensorCountError(
            f"manifest lists {len(entries)} tensors but declares tensor_count={doc.get('tensor_count')}"
        )
    expected_offset = 0
    for entry in entries:
        try:
            name, shape, dtype = entry["name"], entry["shape"], entry["dtype"]
            off, length = entry["byte_offset"], entry["byte_length"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed tensor entry: {entry!r}") from exc
        if dtype != "f64":
            raise ManifestError(f"tensor {name!r} has unsupported dtype {dtype!r}")
        if not isinstance(shape, list) or not all(isinstance(n, int) and n >= 0 for n in shape):
            raise ManifestError(f"tensor {name!r} has malformed shape {shape!r}")
        if length != math.prod(shape) * _DTYPE.itemsize:
            raise ShapeMismatchError(
                f"tensor {name!r}: shape {shape} needs {math.prod(shape) * 8} bytes, manifest says {length}"
            )
        if off != expected_offset:
            raise ManifestError(f"tensor {name!r} starts at {off}, expected {expected_offset}")
        expected_offset += length
    return doc


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Load a container, returning ``(tensors, metadata)``.

    Missing whole tensors at the end of the blob raise ``TensorCountError``;
    a blob that ends inside a tensor raises ``TruncatedBlobError``.
    """
    path = Path(path)
    doc = _read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise TruncatedBlobError(f"no tensor blob in {path}") from exc
    entries = doc["tensors"]
    ends = [e["byte_offset"] + e["byte_length"] for e in entries]
    total = ends[-1] if ends else 0
    if len(blob) < total:
        boundaries = [0] + ends
        if len(blob) in boundaries:
            present = boundaries.index(len(blob))
            raise TensorCountError(f"manifest declares {len(entries)} tensors, blob holds {present}")
        raise TruncatedBlobError(f"tensor blob has {len(blob)} bytes, manifest needs {total}")
    if len(blob) > total:
        raise TensorCountError(f"tensor blob has {len(blob) - total} trailing bytes beyond the manifest")
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        start, stop = entry["byte_offset"], entry["byte_offset"] + entry["byte_length"]
        arr = np.frombuffer(blob[start:stop], dtype=_DTYPE).astype(np.float64).reshape(entry["shape"])
        if entry["name"] in tensors:
            raise ManifestError(f"duplicate tensor name {entry['name']!r}")
        tensors[entry["name"]] = arr
    return tensors, doc["metadata"]

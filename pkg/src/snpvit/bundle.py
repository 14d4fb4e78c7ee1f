"""Tensor bundles: a JSON manifest plus one raw little-endian blob per tensor."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "uint8": np.dtype("u1"),
    "bool": np.dtype("?"),
}


class BundleError(ValueError):
    pass


def _dtype_name(arr: np.ndarray) -> str:
    for name, dt in DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return name
    raise BundleError(f"unsupported element type {arr.dtype}")


def write_bundle(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        fname = f"{i:04d}_{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.bin"
        data = np.ascontiguousarray(arr, dtype=DTYPES[dname])
        (path / fname).write_bytes(data.tobytes(order="C"))
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape), "file": fname, "byte_order": "little"})
    manifest = {"format": "snpvit-tensor-bundle", "version": 1, "entries": entries, "meta": meta or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise BundleError(f"{path}: no {MANIFEST}")
    manifest = json.loads(p.read_text())
    names = [e["name"] for e in manifest["entries"]]
    if len(names) != len(set(names)):
        raise BundleError(f"{path}: duplicate tensor names")
    return manifest


def read_bundle(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    out = {}
    for e in manifest["entries"]:
        dt = DTYPES[e["dtype"]]
        raw = (path / e["file"]).read_bytes()
        expect = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if len(raw) != expect:
            raise BundleError(f"{e['name']}: {len(raw)} bytes, manifest implies {expect}")
        out[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).copy()
    return out, manifest.get("meta", {})

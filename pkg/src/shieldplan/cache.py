"""Binary array caches with JSON sidecars.

``<name>.bin`` holds little-endian float64 data in row-major order;
``<name>.json`` describes it and carries a SHA-256 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class StaleCacheError(RuntimeError):
    """Cache on disk does not match the data or the requested configuration."""


def cache_dir(explicit: str | Path | None = None) -> Path:
    """An explicit directory wins, then ``$SHIELDPLAN_CACHE_DIR``, then ``~/.cache/shieldplan``."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get("SHIELDPLAN_CACHE_DIR")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "shieldplan"


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def write_array(path: str | Path, array: np.ndarray, header: dict) -> Path:
    bin_path, json_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype="<f8")
    payload = data.tobytes()
    meta = dict(header)
    meta.update(version=FORMAT_VERSION, shape=list(data.shape),
                dtype="<f8", sha256=hashlib.sha256(payload).hexdigest())
    bin_path.write_bytes(payload)
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return bin_path


def read_array(path: str | Path, expect: dict | None = None) -> tuple[np.ndarray, dict]:
    """Load and verify; ``expect`` entries must match the header exactly."""
    bin_path, json_path = _paths(path)
    meta = json.loads(json_path.read_text())
    payload = bin_path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta.get("sha256"):
        raise StaleCacheError(f"{bin_path}: content hash mismatch; recompute the cache")
    if meta.get("version") != FORMAT_VERSION:
        raise StaleCacheError(f"{bin_path}: format version {meta.get('version')} unsupported")
    for k, v in (expect or {}).items():
        if meta.get(k) != v:
            raise StaleCacheError(
                f"{bin_path}: {k}={meta.get(k)!r} but configuration needs {v!r}; recompute the cache")
    arr = np.frombuffer(payload, dtype="<f8").reshape(meta["shape"]).copy()
    return arr, meta


def exists(path: str | Path) -> bool:
    b, j = _paths(path)
    return b.exists() and j.exists()

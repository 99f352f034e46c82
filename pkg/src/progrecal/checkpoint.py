"""On-disk formats: model checkpoints and embedding/representation dumps.

A checkpoint is a pair ``<stem>.npz`` (named float64 arrays) and
``<stem>.json`` (``format_version``, ``kind``, ``config``, array names).
A matrix dump is ``<stem>.npy`` plus ``<stem>.json`` holding row ids.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import MissingArtifactError

FORMAT_VERSION = 1


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in {".npz", ".json", ".npy"} else path


def save_checkpoint(path, state: dict[str, np.ndarray], config: dict[str, Any], kind: str) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    with open(stem.with_suffix(".npz"), "wb") as fh:
        np.savez(fh, **{n: np.asarray(state[n], dtype=np.float64) for n in names})
    meta = {"format_version": FORMAT_VERSION, "kind": kind, "config": config, "arrays": names}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem


def load_checkpoint(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    stem = _stem(path)
    npz, meta_path = stem.with_suffix(".npz"), stem.with_suffix(".json")
    if not npz.exists() or not meta_path.exists():
        raise MissingArtifactError(f"checkpoint {stem} not found (expected {npz.name} and {meta_path.name})")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{meta_path}: unsupported format_version {meta.get('format_version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{meta_path}: expected a {kind!r} checkpoint, found {meta.get('kind')!r}")
    with np.load(npz) as data:
        state = {n: data[n].copy() for n in meta["arrays"]}
    return state, meta["config"]


def save_matrix(path, matrix: np.ndarray, ids: list, extra: dict[str, Any] | None = None) -> Path:
    """Write an ``N x d`` float matrix and a manifest naming each row."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float64)
    if len(ids) != matrix.shape[0]:
        raise ValueError(f"{len(ids)} ids for a matrix with {matrix.shape[0]} rows")
    np.save(stem.with_suffix(".npy"), matrix)
    meta = {"format_version": FORMAT_VERSION, "shape": list(matrix.shape), "ids": list(ids)}
    meta.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem


def load_matrix(path) -> tuple[np.ndarray, dict[str, Any]]:
    stem = _stem(path)
    if not stem.with_suffix(".npy").exists():
        raise MissingArtifactError(f"matrix dump {stem}.npy not found")
    meta = json.loads(stem.with_suffix(".json").read_text())
    return np.load(stem.with_suffix(".npy")), meta

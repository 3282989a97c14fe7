"""Parameter checkpoints: a JSON manifest plus one flat little-endian float32 blob.

Manifest layout::

    {
      "format": "f32-blob/1",
      "blob": "params.f32",
      "parameters": [{"name": ..., "shape": [...], "offset": bytes, "nbytes": bytes}, ...],
      "metadata": {...}   # model-specific entries (time constants, schedule, ...)
    }
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np

from ..utils.blob_io import F32_LE, read_json, write_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "f32-blob/1"
MANIFEST_NAME = "manifest.json"


class CheckpointError(Exception):
    """Raised when a checkpoint manifest or blob is malformed."""

    pass


def save_checkpoint(
    directory: Path,
    arrays: dict[str, np.ndarray],
    metadata: Optional[dict[str, Any]] = None,
    blob_name: str = "params.f32",
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    chunks = []
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=F32_LE)
        entries.append(
            {"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes}
        )
        chunks.append(data.tobytes())
        offset += data.nbytes

    with open(directory / blob_name, "wb") as f:
        for chunk in chunks:
            f.write(chunk)

    write_json(
        directory / MANIFEST_NAME,
        {
            "format": CHECKPOINT_FORMAT,
            "blob": blob_name,
            "parameters": entries,
            "metadata": metadata or {},
        },
    )
    logger.info(f"✅ Checkpoint written: {directory} ({len(entries)} tensors, {offset} bytes)")
    return directory


def load_checkpoint(directory: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return (arrays by name, metadata)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint manifest not found: {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"Unsupported checkpoint format {manifest.get('format')!r} in {manifest_path}"
        )

    blob_path = directory / manifest["blob"]
    if not blob_path.exists():
        raise FileNotFoundError(f"Checkpoint blob not found: {blob_path}")
    raw = blob_path.read_bytes()

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["parameters"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(raw):
            raise CheckpointError(f"Entry {entry['name']} overruns blob {blob_path}")
        values = np.frombuffer(raw[start : start + nbytes], dtype=F32_LE)
        arrays[entry["name"]] = values.reshape(entry["shape"]).astype(np.float32)
    return arrays, manifest.get("metadata", {})

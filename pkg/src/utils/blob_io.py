"""Little-endian float32 blob files and small JSON helpers."""

import json
from pathlib import Path
from typing import Any, Sequence

import numpy as np

F32_LE = np.dtype("<f4")


def write_f32(path: Path, array: np.ndarray) -> int:
    """Write ``array`` row-major as little-endian float32. Returns bytes written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=F32_LE)
    data.tofile(path)
    return data.nbytes


def read_f32(path: Path, shape: Sequence[int]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Blob not found: {path}")
    data = np.fromfile(path, dtype=F32_LE)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(
            f"Blob {path} holds {data.size} floats, expected {expected} for shape {tuple(shape)}"
        )
    return data.reshape(shape).astype(np.float32)


def write_json(path: Path, payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)

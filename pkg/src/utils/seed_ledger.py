"""Named, recorded random streams.

Every stochastic consumer asks the ledger for a generator by path
(``"eval/full/case-03/trial-1/planner"``). The child seed is a pure function of
the root seed and the path, so a serialized ledger is enough to replay any
stream, and siblings never share a seed.
"""

import hashlib
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .blob_io import read_json, write_json

logger = logging.getLogger(__name__)


def derive_seed(root: int, path: str) -> int:
    """63-bit child seed for ``path`` under ``root``."""
    digest = hashlib.sha256(path.encode("utf-8")).digest()
    words = np.frombuffer(digest[:16], dtype="<u4").tolist()
    sequence = np.random.SeedSequence([int(root) & 0xFFFFFFFF, *words])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1


class SeedLedger:
    """Root seed plus the record of every child stream handed out."""

    def __init__(self, root_seed: int, prefix: str = ""):
        self.root_seed = int(root_seed)
        self.prefix = prefix
        self.entries: dict[str, int] = {}

    def _full_path(self, name: str) -> str:
        return f"{self.prefix}/{name}" if self.prefix else name

    def seed(self, name: str) -> int:
        path = self._full_path(name)
        value = derive_seed(self.root_seed, path)
        previous = self.entries.get(path)
        if previous is not None and previous != value:
            raise ValueError(f"Seed ledger conflict at {path}")
        self.entries[path] = value
        return value

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed(name))

    def child(self, name: str) -> "SeedLedger":
        """Ledger scoped under ``name``; it records into this ledger's entries."""
        scoped = SeedLedger(self.root_seed, self._full_path(name))
        scoped.entries = self.entries
        return scoped

    def to_dict(self) -> dict:
        return {"root_seed": self.root_seed, "streams": dict(sorted(self.entries.items()))}

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())
        logger.info(f"✅ Seed ledger written: {path} ({len(self.entries)} streams)")

    @classmethod
    def load(cls, path: Path, prefix: Optional[str] = None) -> "SeedLedger":
        payload = read_json(path)
        ledger = cls(payload["root_seed"], prefix or "")
        ledger.entries = {k: int(v) for k, v in payload.get("streams", {}).items()}
        return ledger

    def verify(self) -> list[str]:
        """Paths whose recorded seed no longer matches derivation (empty when consistent)."""
        return [
            path
            for path, value in self.entries.items()
            if derive_seed(self.root_seed, path) != value
        ]

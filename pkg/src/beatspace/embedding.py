"""The 2-D embedding container and its on-disk formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Embedding", "write_embedding_csv", "write_provenance", "read_embedding_csv"]


@dataclass
class Embedding:
    """N x d coordinates plus provenance describing how they were produced."""

    Y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim != 2:
            raise ValueError("embedding must be a 2-D array")
        if not np.isfinite(self.Y).all():
            raise ValueError("embedding contains non-finite coordinates")

    def __len__(self) -> int:
        return self.Y.shape[0]


def write_embedding_csv(emb: Embedding, path: str | Path, meta: dict[str, np.ndarray] | None = None) -> None:
    """CSV layout: index, y0, y1[, metadata columns]."""
    meta = meta or {}
    names = list(meta)
    with open(path, "w", newline="") as f:
        cols = "".join(f",{name}" for name in names)
        f.write(f"index,y0,y1{cols}\n")
        for i in range(len(emb)):
            extra = "".join(f",{meta[name][i]}" for name in names)
            f.write(f"{i},{float(emb.Y[i, 0])!r},{float(emb.Y[i, 1])!r}{extra}\n")


def read_embedding_csv(path: str | Path) -> np.ndarray:
    import csv

    ys = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            ys.append((float(row[1]), float(row[2])))
    return np.asarray(ys, dtype=np.float64)


def write_provenance(emb: Embedding, path: str | Path) -> None:
    """Key-value sidecar, one ``key = value`` line per provenance entry."""
    with open(path, "w") as f:
        for key in sorted(emb.provenance):
            f.write(f"{key} = {emb.provenance[key]}\n")

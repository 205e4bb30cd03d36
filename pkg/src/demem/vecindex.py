"""Flat exact nearest-neighbor index over unit-normalized embeddings.

Novelty of a query is one minus its best cosine similarity against the
indexed rows, computed by an exhaustive scan (the scan IS the contract; no
approximate structures). Rows are stored float32 so the on-disk container
round-trips bit-exactly.

Container: magic ``CAPIDX1\\0``, little-endian uint32 dim, little-endian
uint64 count, then count*dim little-endian float32 values, row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

CAPIDX_MAGIC = b"CAPIDX1\x00"
UNIT_NORM_TOL = 1e-6
_LOAD_NORM_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class VectorIndex:
    """An immutable (count, dim) block of unit-normalized float32 rows."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.rows, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("index rows must form a non-empty 2-D array")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "rows", arr)

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def check_unit(vec: np.ndarray, tol: float = UNIT_NORM_TOL, what: str = "embedding") -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be 1-D")
    norm = float(np.linalg.norm(arr))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{what} must be unit-normalized (norm {norm:.8f})")
    return arr


def normalize(vec: np.ndarray) -> np.ndarray:
    """L2-normalize a vector (errors on zero norm)."""
    arr = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return arr / norm


def build_index(embeddings) -> VectorIndex:
    """Stack unit-normalized embeddings into an index (validates each row)."""
    rows = [check_unit(e, what=f"embedding {i}") for i, e in enumerate(embeddings)]
    if not rows:
        raise ValueError("cannot build an index from zero embeddings")
    dim = rows[0].size
    for i, r in enumerate(rows):
        if r.size != dim:
            raise ValueError(f"embedding {i} has dim {r.size}, expected {dim}")
    return VectorIndex(rows=np.stack(rows).astype(np.float32))


def novelty_score(f: np.ndarray, index: VectorIndex) -> float:
    """1 - max cosine similarity against the index, by exhaustive scan."""
    query = check_unit(f, what="query embedding")
    if query.size != index.dim:
        raise ValueError(f"query dim {query.size} does not match index dim {index.dim}")
    sims = index.rows.astype(np.float64) @ query
    return float(1.0 - sims.max())


def save_index(index: VectorIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(CAPIDX_MAGIC)
        fh.write(struct.pack("<I", index.dim))
        fh.write(struct.pack("<Q", index.count))
        fh.write(index.rows.astype("<f4").tobytes(order="C"))


def load_index(path: str | Path) -> VectorIndex:
    raw = Path(path).read_bytes()
    header = len(CAPIDX_MAGIC) + 4 + 8
    if len(raw) < header:
        raise FormatError(f"{path}: truncated index container")
    if raw[: len(CAPIDX_MAGIC)] != CAPIDX_MAGIC:
        raise FormatError(f"{path}: bad magic for index container")
    (dim,) = struct.unpack_from("<I", raw, len(CAPIDX_MAGIC))
    (count,) = struct.unpack_from("<Q", raw, len(CAPIDX_MAGIC) + 4)
    expected = header + 4 * dim * count
    if dim < 1 or count < 1 or len(raw) != expected:
        raise FormatError(f"{path}: index size mismatch (dim={dim}, count={count})")
    rows = np.frombuffer(raw, dtype="<f4", offset=header).reshape(count, dim)
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > _LOAD_NORM_TOL):
        raise FormatError(f"{path}: index rows are not unit-normalized")
    return VectorIndex(rows=rows)

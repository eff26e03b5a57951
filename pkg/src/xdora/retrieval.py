"""Exact flat similarity index over unit-norm fused vectors.

Keys are stored as float32 (normalized once at build time); every dot
product accumulates in float64, and search is an exhaustive scan, so
results are exactly those of a brute-force oracle. Ties in similarity are
broken by insertion order; argmax ties by lowest class index.

Index files ("XDZI") store, little-endian: magic, version u32=1,
count u64, dim u32, then per entry id_len u16 + UTF-8 id, label i32,
key dim x f32 (already normalized).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ClassMissing,
    DimensionMismatch,
    EmptyIndex,
    EmptyNeighborSet,
    TruncatedFile,
    VersionMismatch,
)
from .numerics import l2_normalize

XDZI_MAGIC = b"XDZI"
XDZI_VERSION = 1


@dataclass(frozen=True)
class Neighbor:
    id: str
    label: int
    similarity: float


NeighborSet = list[Neighbor]


@dataclass(frozen=True)
class PerClassNeighbors:
    """Per-class retrieval result; ``missing_classes`` flags empty classes."""
    neighbors: NeighborSet
    missing_classes: tuple[int, ...] = ()


class FlatIndex:
    """Immutable exact-search index; concurrent queries are safe."""

    def __init__(self, ids: list[str], labels: np.ndarray, keys: np.ndarray):
        self.ids = ids
        self.labels = labels          # (N,) int64
        self.keys = keys              # (N, dim) float32, unit rows

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.keys.shape[1])


def build_index(entries: Iterable[tuple[str, int, np.ndarray]]) -> FlatIndex:
    """Normalize raw vectors and freeze them into a flat index."""
    ids: list[str] = []
    labels: list[int] = []
    rows: list[np.ndarray] = []
    dim = None
    for rid, label, vec in entries:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1:
            raise DimensionMismatch(f"entry {rid!r}: key must be 1-D, got {vec.shape}")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise DimensionMismatch(
                f"entry {rid!r}: dim {vec.shape[0]} != index dim {dim}")
        rows.append(l2_normalize(vec).astype(np.float32))
        ids.append(rid)
        labels.append(int(label))
    keys = np.stack(rows) if rows else np.zeros((0, dim or 0), dtype=np.float32)
    return FlatIndex(ids, np.asarray(labels, dtype=np.int64), keys)


def _similarities(index: FlatIndex, query: np.ndarray) -> np.ndarray:
    q = l2_normalize(np.asarray(query, dtype=np.float64))
    if index.keys.shape[1] != q.shape[0]:
        raise DimensionMismatch(
            f"query dim {q.shape[0]} != index dim {index.keys.shape[1]}")
    return index.keys.astype(np.float64) @ q


def _take(index: FlatIndex, order: np.ndarray, sims: np.ndarray) -> NeighborSet:
    return [Neighbor(index.ids[i], int(index.labels[i]), float(sims[i]))
            for i in order]


def top_k(index: FlatIndex, query: np.ndarray, k: int) -> NeighborSet:
    """The k entries with highest cosine similarity to ``query``, exactly."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    sims = _similarities(index, query)
    # stable sort on negated sims keeps insertion order among ties
    order = np.argsort(-sims, kind="stable")[:k]
    return _take(index, order, sims)


def top_k_per_class(index: FlatIndex, query: np.ndarray, k: int,
                    C: int) -> PerClassNeighbors:
    """For each class, its k most similar entries; blocks concatenated in
    class order. Classes absent from the index are reported, not fatal."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return PerClassNeighbors([], tuple(range(C)))
    sims = _similarities(index, query)
    order = np.argsort(-sims, kind="stable")
    neighbors: NeighborSet = []
    missing: list[int] = []
    for cls in range(C):
        block = [i for i in order if index.labels[i] == cls][:k]
        if not block:
            missing.append(cls)
            continue
        neighbors.extend(_take(index, np.asarray(block), sims))
    return PerClassNeighbors(neighbors, tuple(missing))


def aggregate_labels(neighbors: NeighborSet, C: int) -> np.ndarray:
    """Similarity-weighted soft label distribution over C classes.

    Negative similarities are clamped to zero so the output is always a
    valid distribution; if every weight clamps away, falls back to uniform.
    """
    if not neighbors:
        raise EmptyNeighborSet("cannot aggregate an empty neighbor set")
    weights = np.zeros(C, dtype=np.float64)
    for nb in neighbors:
        if not (0 <= nb.label < C):
            raise ClassMissing(f"neighbor label {nb.label} outside 0..{C - 1}")
        weights[nb.label] += max(nb.similarity, 0.0)
    total = weights.sum()
    if total <= 0.0:
        return np.full(C, 1.0 / C)
    return weights / total


def predict_knn(index: FlatIndex, query: np.ndarray, k: int, C: int,
                per_class: bool = False,
                uniform_weights: bool = False) -> tuple[int, np.ndarray]:
    """Retrieve, aggregate, argmax. ``uniform_weights`` turns the
    similarity weighting into plain majority voting."""
    if len(index) == 0:
        raise EmptyIndex("cannot predict from an empty index")
    if per_class:
        neighbors = top_k_per_class(index, query, k, C).neighbors
    else:
        neighbors = top_k(index, query, k)
    if uniform_weights:
        neighbors = [Neighbor(n.id, n.label, 1.0) for n in neighbors]
    probs = aggregate_labels(neighbors, C)
    return int(np.argmax(probs)), probs


# ---------------------------------------------------------------------------
# XDZI files
# ---------------------------------------------------------------------------

def save_index(path: str | Path, index: FlatIndex) -> None:
    dim = index.keys.shape[1]
    parts = [XDZI_MAGIC, struct.pack("<I", XDZI_VERSION),
             struct.pack("<Q", len(index)), struct.pack("<I", dim)]
    for i, rid in enumerate(index.ids):
        encoded = rid.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<i", int(index.labels[i])))
        parts.append(np.ascontiguousarray(index.keys[i], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> FlatIndex:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise TruncatedFile("index file shorter than its header")
    if data[:4] != XDZI_MAGIC:
        raise BadMagic(f"expected {XDZI_MAGIC!r}, found {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != XDZI_VERSION:
        raise VersionMismatch(f"unsupported XDZI version {version}")
    (count,) = struct.unpack_from("<Q", data, 8)
    (dim,) = struct.unpack_from("<I", data, 16)
    pos = 20
    ids: list[str] = []
    labels: list[int] = []
    keys = np.zeros((count, dim), dtype=np.float32)
    for n in range(count):
        if pos + 2 > len(data):
            raise TruncatedFile(f"entry {n} header extends past end of file")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + 4 + 4 * dim > len(data):
            raise TruncatedFile(f"entry {n} extends past end of file")
        ids.append(data[pos:pos + id_len].decode("utf-8"))
        pos += id_len
        (label,) = struct.unpack_from("<i", data, pos)
        pos += 4
        # keys were normalized at build time; do not renormalize, so the
        # file round-trips bit-exactly
        keys[n] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        labels.append(label)
    if pos != len(data):
        raise TruncatedFile(f"{len(data) - pos} trailing bytes after entries")
    return FlatIndex(ids, np.asarray(labels, dtype=np.int64), keys)

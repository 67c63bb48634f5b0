"""Exact vector index over unit-norm embeddings, plus retrieval metrics.

Search is an exhaustive cosine scan: at desk scale exactness is cheap,
testable against a brute-force oracle, and free of recall loss. The
on-disk format is a versioned binary with no timestamps, so rebuilding
from identical inputs yields identical bytes.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, InvariantError

_INDEX_MAGIC = b"RKINDEX1"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[tuple[str, float], ...]
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise InvariantError("k must be >= 1")
        if len(self.ranked) > self.k:
            raise InvariantError(f"{len(self.ranked)} results exceed k={self.k}")
        for (id_a, score_a), (id_b, score_b) in zip(self.ranked, self.ranked[1:]):
            if score_b > score_a or (score_b == score_a and id_b < id_a):
                raise InvariantError(
                    f"results out of order at {id_a!r} -> {id_b!r}")

    def ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.ranked]


class VectorIndex:
    """Immutable exact-search index; concurrent searches are safe."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray,
                 checkpoint_hash: str = "", built_at: float | None = None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DataError(f"index matrix must be 2-D, got shape {matrix.shape}")
        if len(ids) != matrix.shape[0]:
            raise DataError(f"{len(ids)} ids for {matrix.shape[0]} rows")
        if len(set(ids)) != len(ids):
            raise DataError("index ids must be unique")
        if matrix.size:
            norms = np.linalg.norm(matrix, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
            if len(bad):
                raise DataError(f"row {ids[bad[0]]!r} is not unit-norm "
                                f"(|v| = {norms[bad[0]]:.6f})")
        self._ids = list(ids)
        self._matrix = matrix
        self._matrix.setflags(write=False)
        self.checkpoint_hash = checkpoint_hash
        # wall-clock metadata lives only in memory, never in the artifact
        self.built_at = time.time() if built_at is None else built_at

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def dimension(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix


def build(embeddings: Mapping[str, np.ndarray], checkpoint_hash: str = "") -> VectorIndex:
    """Build an index from an id -> unit-vector mapping."""
    ids = list(embeddings)
    if not ids:
        return VectorIndex([], np.zeros((0, 0)), checkpoint_hash)
    dims = {np.asarray(embeddings[i]).shape for i in ids}
    if len(dims) > 1 or any(len(s) != 1 for s in dims):
        raise DataError(f"embedding shapes disagree: {sorted(dims)}")
    matrix = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    return VectorIndex(ids, matrix, checkpoint_hash)


def search(index: VectorIndex, query_vec: np.ndarray, k: int,
           query_id: str = "") -> RetrievalResult:
    """Exact top-k by cosine; ties break toward ascending id.

    The query is normalized here, so callers may pass any non-zero
    vector and still get cosine scores.
    """
    if k < 1:
        raise InvariantError("k must be >= 1")
    if len(index) == 0:
        return RetrievalResult(query_id, (), k)
    q = np.asarray(query_vec, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise DataError(f"query shape {q.shape} does not match index "
                        f"dimension {index.dimension}")
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise DataError("query vector is degenerate (zero norm)")
    scores = index.matrix @ (q / norm)
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    top = order[: min(k, len(order))]
    return RetrievalResult(query_id,
                           tuple((index.ids[i], float(scores[i])) for i in top), k)


# ---------------------------------------------------------------------------
# Retrieval metrics


def recall_at_k(results: Sequence[RetrievalResult], gold: Mapping, k: int,
                texts: Mapping[str, str] | None = None) -> float:
    """Fraction of queries whose top-k contains an answer-bearing row.

    Id mode (texts None): gold maps query id -> collection of gold ids;
    a hit is any retrieved id in that collection. Span mode: gold maps
    query id -> answer string; a hit is any retrieved row whose text
    contains the answer, case-insensitive.
    """
    if k < 1:
        raise InvariantError("k must be >= 1")
    if not results:
        raise DataError("recall over zero queries is undefined")
    hits = 0
    for result in results:
        if result.query_id not in gold:
            raise DataError(f"no gold entry for query {result.query_id!r}")
        want = gold[result.query_id]
        top = result.ids()[:k]
        if texts is None:
            gold_ids = {want} if isinstance(want, str) else set(want)
            hit = any(doc_id in gold_ids for doc_id in top)
        else:
            needle = str(want).lower()
            hit = any(needle in texts[doc_id].lower() for doc_id in top)
        hits += bool(hit)
    return hits / len(results)


# ---------------------------------------------------------------------------
# Persistence: magic, length-prefixed JSON header, raw float64 rows.


def index_to_bytes(index: VectorIndex) -> bytes:
    header = json.dumps({
        "version": _FORMAT_VERSION,
        "dimension": index.dimension,
        "rows": len(index),
        "checkpoint_hash": index.checkpoint_hash,
        "ids": index.ids,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = np.ascontiguousarray(index.matrix, dtype="<f8").tobytes()
    return _INDEX_MAGIC + struct.pack("<Q", len(header)) + header + body


def index_from_bytes(data: bytes) -> VectorIndex:
    if data[: len(_INDEX_MAGIC)] != _INDEX_MAGIC:
        raise DataError("not an index file (bad magic)")
    offset = len(_INDEX_MAGIC)
    (header_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    header = json.loads(data[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    if header["version"] != _FORMAT_VERSION:
        raise DataError(f"unsupported index format version {header['version']}")
    rows, dim = header["rows"], header["dimension"]
    expected = rows * dim * 8
    body = data[offset:]
    if len(body) != expected:
        raise DataError(f"index body has {len(body)} bytes, expected {expected}")
    matrix = np.frombuffer(body, dtype="<f8").reshape(rows, dim).astype(np.float64)
    return VectorIndex(header["ids"], matrix, header["checkpoint_hash"])


def save_index(index: VectorIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_to_bytes(index))


def load_index(path: str | Path) -> VectorIndex:
    return index_from_bytes(Path(path).read_bytes())

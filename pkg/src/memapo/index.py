"""Exact cosine-similarity index over a handful of embedding vectors.

Memory holds at most a few dozen templates, so retrieval is a plain linear
scan. Scores are computed with the same elementwise-multiply-then-sum
reduction for one pair and for a whole matrix, which keeps the batched path
bit-identical to :func:`cosine_similarity`.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import DimensionMismatch, ZeroNorm

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredHit:
    id: str
    score: float


def as_vector(values) -> np.ndarray:
    vec = np.array(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise DimensionMismatch(f"expected a non-empty 1-D vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("embedding contains non-finite values")
    return vec


def _norm(vec: np.ndarray) -> np.float64:
    return np.sqrt((vec * vec).sum())


def cosine_similarity(a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape[0]} != {b.shape[0]}")
    na, nb = _norm(a), _norm(b)
    if na == 0 or nb == 0:
        raise ZeroNorm("cosine similarity of a zero vector is undefined")
    score = (a * b).sum() / (na * nb)
    return float(np.clip(score, -1.0, 1.0))


class VectorIndex:
    """Mapping of entry id to embedding with exact top-k retrieval.

    Insertion order of ids is kept (replacing a vector keeps its slot).
    Writers take an internal lock; readers work on an immutable cached matrix.
    """

    def __init__(self, dim: int | None = None):
        self._dim = dim
        self._rows: dict[str, np.ndarray] = {}
        self._cache: tuple[list[str], np.ndarray, np.ndarray] | None = None
        self._lock = threading.Lock()

    @property
    def dim(self) -> int | None:
        return self._dim

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, id: str) -> bool:
        return id in self._rows

    def __iter__(self) -> Iterator[str]:
        return iter(list(self._rows))

    def get(self, id: str) -> np.ndarray:
        return self._rows[id].copy()

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return [(k, v.copy()) for k, v in self._rows.items()]

    def upsert(self, id: str, vector) -> None:
        vec = as_vector(vector)
        with self._lock:
            if self._dim is None:
                self._dim = vec.shape[0]
            elif vec.shape[0] != self._dim:
                raise DimensionMismatch(
                    f"vector for {id!r} has dimension {vec.shape[0]}, index has {self._dim}"
                )
            vec.setflags(write=False)
            self._rows[id] = vec
            self._cache = None

    def remove(self, id: str) -> bool:
        """Drop ``id``; returns False (and logs) when it was not present."""
        with self._lock:
            if id not in self._rows:
                log.warning("remove: unknown vector id %r", id)
                return False
            del self._rows[id]
            self._cache = None
            return True

    def _matrix(self) -> tuple[list[str], np.ndarray, np.ndarray]:
        cache = self._cache
        if cache is None:
            with self._lock:
                ids = list(self._rows)
                if ids:
                    mat = np.ascontiguousarray(np.stack([self._rows[i] for i in ids]))
                else:
                    mat = np.empty((0, self._dim or 0))
                norms = np.sqrt((mat * mat).sum(axis=1))
                cache = self._cache = (ids, mat, norms)
        return cache

    def scores(self, query) -> dict[str, float]:
        """Cosine similarity of ``query`` against every stored vector."""
        q = as_vector(query)
        nq = _norm(q)
        if nq == 0:
            raise ZeroNorm("query vector has zero norm")
        ids, mat, norms = self._matrix()
        if not ids:
            return {}
        if q.shape[0] != mat.shape[1]:
            raise DimensionMismatch(f"query has dimension {q.shape[0]}, index has {mat.shape[1]}")
        if np.any(norms == 0):
            raise ZeroNorm("index holds a zero vector")
        raw = (mat * q).sum(axis=1) / (norms * nq)
        return dict(zip(ids, np.clip(raw, -1.0, 1.0).tolist()))

    def top_k(self, query, k: int, threshold: float) -> list[ScoredHit]:
        if k < 0:
            raise ValueError("k must be >= 0")
        hits = [ScoredHit(i, s) for i, s in self.scores(query).items() if s >= threshold]
        hits.sort(key=lambda h: (-h.score, h.id))
        return hits[:k]

    def copy(self) -> "VectorIndex":
        out = VectorIndex(self._dim)
        out._rows = dict(self._rows)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        # slot order never affects retrieval, so it is not part of equality
        if self._dim != other._dim or self._rows.keys() != other._rows.keys():
            return False
        return all(
            self._rows[i].tobytes() == other._rows[i].tobytes() for i in self._rows
        )

    def __repr__(self) -> str:
        return f"VectorIndex(n={len(self)}, dim={self._dim})"

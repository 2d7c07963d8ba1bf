"""Embedding backends, cosine similarity, top-k candidate retrieval and anchor ranking."""

from __future__ import annotations

import hashlib
import heapq
import re
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol, runtime_checkable

import numpy as np

from .errors import EmbeddingError, TaxonomyError
from .taxonomy import ROOT, Entity, Taxonomy

HASH_DIM = 256


@runtime_checkable
class EmbeddingBackend(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def embed_many(backend: EmbeddingBackend, texts: Sequence[str]) -> list[np.ndarray]:
    batch = getattr(backend, "embed_batch", None)
    if batch is not None:
        return list(batch(list(texts)))
    return [backend.embed(t) for t in texts]


_TOKEN = re.compile(r"[^\W_]+")


def _tokens(text: str) -> list[str]:
    toks = _TOKEN.findall(text.lower())
    return toks or [text.lower()]


class HashEmbedder:
    """Deterministic, dependency-free embedder for tests and offline runs.

    Every token maps to a sparse pseudo-random unit vector built from hashed
    features: the token itself plus its boundary-marked character trigrams, so
    inflections ("disease"/"diseases") land close together. A text vector is the
    renormalized sum of its token vectors. Hashing uses blake2b, so vectors are
    identical across processes and platforms.
    """

    def __init__(self, dim: int = HASH_DIM, nnz: int = 8, seed: int = 0):
        if dim < nnz or nnz < 1:
            raise ValueError("need dim >= nnz >= 1")
        self.dim = dim
        self.nnz = nnz
        self.seed = seed
        self.name = f"hash-{dim}"
        self._feature = lru_cache(maxsize=65536)(self._feature_uncached)
        self._token = lru_cache(maxsize=65536)(self._token_uncached)

    def _feature_uncached(self, feat: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}\x1f{feat}".encode(), digest_size=8).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
        v = np.zeros(self.dim)
        idx = rng.choice(self.dim, size=self.nnz, replace=False)
        v[idx] = rng.choice((-1.0, 1.0), size=self.nnz) / np.sqrt(self.nnz)
        v.flags.writeable = False
        return v

    def _token_uncached(self, tok: str) -> np.ndarray:
        marked = f"<{tok}>"
        feats = [f"w:{tok}"] + [f"g:{marked[i:i + 3]}" for i in range(len(marked) - 2)]
        v = np.sum([self._feature(f) for f in feats], axis=0)
        v = v / np.linalg.norm(v)
        v.flags.writeable = False
        return v

    def embed(self, text: str) -> np.ndarray:
        v = np.sum([self._token(t) for t in _tokens(text)], axis=0)
        n = np.linalg.norm(v)
        if n == 0.0:
            # opposite-signed token vectors cancelled exactly; fall back to the whole string
            v = self._token("\x00" + text)
            n = 1.0
        return v / n


class CachedEmbedder:
    """Thread-safe per-run cache in front of any backend, keyed by text."""

    def __init__(self, backend: EmbeddingBackend):
        self.backend = backend
        self.name = backend.name
        self.dim = backend.dim
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            hit = self._cache.get(text)
        if hit is not None:
            return hit
        v = np.asarray(self.backend.embed(text), dtype=float)
        v.flags.writeable = False
        with self._lock:
            return self._cache.setdefault(text, v)

    def embed_batch(self, texts: list[str]) -> list[np.ndarray]:
        with self._lock:
            missing = list(dict.fromkeys(t for t in texts if t not in self._cache))
        if missing:
            vecs = embed_many(self.backend, missing)
            with self._lock:
                for t, v in zip(missing, vecs):
                    v = np.asarray(v, dtype=float)
                    v.flags.writeable = False
                    self._cache.setdefault(t, v)
        with self._lock:
            return [self._cache[t] for t in texts]

    def __len__(self) -> int:
        return len(self._cache)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 1:
        raise EmbeddingError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise EmbeddingError("embedding has non-finite components")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise EmbeddingError("cosine similarity of a zero vector is undefined")
    return float(min(1.0, max(-1.0, np.dot(u, v) / (nu * nv))))


def entity_text(e: Entity) -> str:
    return e.norm.lower()


def _scores(query: Entity, pool: Sequence[Entity], backend: EmbeddingBackend) -> list[float]:
    vecs = embed_many(backend, [entity_text(query)] + [entity_text(p) for p in pool])
    q = vecs[0]
    return [cosine_similarity(q, v) for v in vecs[1:]]


def _dedupe(items: Iterable[Entity]) -> list[Entity]:
    return list(dict.fromkeys(items))


def top_k_candidates(
    query: Entity, pool: Iterable[Entity], k: int, backend: EmbeddingBackend
) -> list[Entity]:
    """The *k* pool entities most similar to *query*, best first.

    The query itself is dropped from the pool. Ties go to the smaller normalized
    text, so the result does not depend on pool iteration order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    items = [p for p in _dedupe(pool) if p != query]
    if not items:
        raise EmbeddingError("candidate pool is empty")
    scored = zip(_scores(query, items, backend), items)
    best = heapq.nsmallest(k, scored, key=lambda se: (-se[0], se[1].norm))
    return [e for _, e in best]


@dataclass(frozen=True)
class CandidateSet:
    query: Entity
    candidates: tuple[Entity, ...]
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.candidates:
            raise ValueError("candidate set is empty")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("duplicate candidates")
        if self.query in self.candidates:
            raise ValueError("query cannot be its own candidate")
        if len(self.candidates) > self.k + 1:
            raise ValueError(f"{len(self.candidates)} candidates exceed k+1 = {self.k + 1}")

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __contains__(self, e: object) -> bool:
        return e in self.candidates

    def reordered(self, order: Sequence[Entity]) -> CandidateSet:
        if sorted(e.norm for e in order) != sorted(e.norm for e in self.candidates):
            raise ValueError("reordering must be a permutation of the candidates")
        return CandidateSet(self.query, tuple(order), self.k)


def build_candidate_parents(
    query: Entity,
    taxonomy: Taxonomy,
    k: int,
    backend: EmbeddingBackend,
    true_parent: Entity | None = None,
    pool: Iterable[Entity] | None = None,
) -> CandidateSet:
    """Top-k similar nodes as parent candidates, plus the true parent in training mode.

    *pool* restricts retrieval to a subset of the taxonomy (e.g. one layer);
    by default every non-root node except the query is eligible.
    """
    if len(taxonomy) < 2:
        raise TaxonomyError("taxonomy has fewer than 2 nodes; nothing to retrieve from")
    if true_parent is not None and true_parent not in taxonomy:
        raise TaxonomyError(f"true parent {true_parent.surface!r} not in taxonomy", node=true_parent.surface)
    if pool is None:
        pool = taxonomy.nodes
    else:
        pool = [taxonomy.get(p) for p in pool]
    top = top_k_candidates(query, [p for p in pool if p != ROOT], k, backend)
    if true_parent is not None and true_parent not in top:
        top.append(taxonomy.get(true_parent))
    return CandidateSet(query, tuple(top), k)


def rank_entities(
    entities: Iterable[Entity], anchor: Entity, backend: EmbeddingBackend
) -> list[tuple[Entity, float]]:
    """Score each entity by cosine similarity to *anchor*; descending, ties by norm."""
    items = _dedupe(entities)
    if not items:
        raise EmbeddingError("nothing to rank")
    scored = zip(items, _scores(anchor, items, backend))
    return sorted(scored, key=lambda es: (-es[1], es[0].norm))

"""In-memory vector index with exact cosine top-k search, plus embedding providers.

Search is an exact scan: corpus sizes here are small enough that determinism
beats approximate structures.  Ties are broken by ascending record id so
results are reproducible bit for bit.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import numpy as np

from .errors import RetrievalError

if TYPE_CHECKING:
    from .corpus import PaperRecord

logger = logging.getLogger(__name__)

SIDECAR_MAGIC = b"SFEMB1"


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True)
class RetrievalHit:
    record_id: str
    score: float


def normalize_vector(values: Sequence[float]) -> EmbeddingVector:
    """Scale to unit L2 norm; idempotent within float error."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("vector must be a non-empty 1-d sequence")
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return EmbeddingVector(tuple((arr / norm).tolist()))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    ua = normalize_vector(a.values).as_array()
    ub = normalize_vector(b.values).as_array()
    return float(np.clip(ua @ ub, -1.0, 1.0))


class VectorIndex:
    """Immutable (record id, unit vector) rows; safe for concurrent searches."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        self._ids = tuple(ids)
        self._matrix = matrix
        self._row_of = {rid: i for i, rid in enumerate(self._ids)}

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[str, Sequence[float]]]) -> "VectorIndex":
        ids: list[str] = []
        rows: list[np.ndarray] = []
        dim: int | None = None
        for record_id, values in entries:
            if record_id in set(ids):
                raise ValueError(f"duplicate entry for id '{record_id}'")
            vec = normalize_vector(values)
            if dim is None:
                dim = vec.dim
            elif vec.dim != dim:
                raise ValueError(
                    f"entry '{record_id}' has dim {vec.dim}, index uses {dim}"
                )
            ids.append(record_id)
            rows.append(vec.as_array())
        matrix = np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float64)
        return cls(ids, matrix)

    @property
    def dim(self) -> int:
        return int(self._matrix.shape[1])

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._row_of

    def vector_for(self, record_id: str) -> EmbeddingVector:
        try:
            row = self._row_of[record_id]
        except KeyError:
            raise RetrievalError(f"no embedding for record '{record_id}'") from None
        return EmbeddingVector(tuple(self._matrix[row].tolist()))

    def subset(self, record_ids: Sequence[str]) -> "VectorIndex":
        """New index over the given ids, preserving their order."""
        rows = []
        for record_id in record_ids:
            if record_id not in self._row_of:
                raise RetrievalError(f"no embedding for record '{record_id}'")
            rows.append(self._row_of[record_id])
        matrix = self._matrix[rows] if rows else np.zeros((0, 0), dtype=np.float64)
        return VectorIndex(record_ids, matrix)

    def save(self, path: str | Path) -> int:
        return write_embeddings(path, self.dim, zip(self._ids, self._matrix))

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        dim, vectors = read_embeddings(path)
        return cls.from_entries(vectors.items())


def top_k_search(index: VectorIndex, query: EmbeddingVector, k: int) -> list[RetrievalHit]:
    """Exact top-k by cosine score, ties broken by ascending record id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    if query.dim != index.dim:
        raise ValueError(f"query dim {query.dim} does not match index dim {index.dim}")
    q = normalize_vector(query.values).as_array()
    scores = index._matrix @ q
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [
        RetrievalHit(index.ids[i], float(np.clip(scores[i], -1.0, 1.0)))
        for i in order[:k]
    ]


def embed_text(text: str, provider: "EmbeddingProvider") -> EmbeddingVector:
    """Embed arbitrary text via the provider and unit-normalize the result."""
    if not text.strip():
        raise ValueError("cannot embed empty text")
    values = provider.embed(text)
    if len(values) != provider.dim:
        raise RetrievalError(
            f"provider returned dim {len(values)}, expected {provider.dim}"
        )
    return normalize_vector(values)


def build_index(records: Sequence["PaperRecord"], provider: "EmbeddingProvider") -> VectorIndex:
    """Index every record; a record without an available embedding is an error."""
    entries = []
    for record in records:
        values = provider.embed_record(record)
        if len(values) != provider.dim:
            raise RetrievalError(
                f"embedding for record '{record.id}' has dim {len(values)}, "
                f"expected {provider.dim}"
            )
        entries.append((record.id, values))
    return VectorIndex.from_entries(entries)


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> Sequence[float]: ...

    def embed_record(self, record: "PaperRecord") -> Sequence[float]: ...


class HashEmbeddingProvider:
    """Deterministic keyed-hash embeddings for offline runs and tests.

    Not semantically meaningful, but stable across platforms and runs, which
    is what the deterministic pipeline tests need.
    """

    def __init__(self, dim: int = 16, key: bytes = b"surveygen"):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.key = key

    def embed(self, text: str) -> list[float]:
        values: list[float] = []
        counter = 0
        while len(values) < self.dim:
            h = hashlib.blake2b(
                text.encode("utf-8") + counter.to_bytes(4, "little"),
                key=self.key,
                digest_size=32,
            ).digest()
            for off in range(0, len(h), 4):
                if len(values) >= self.dim:
                    break
                word = int.from_bytes(h[off : off + 4], "little")
                values.append(word / 2**31 - 1.0)
            counter += 1
        return values

    def embed_record(self, record: "PaperRecord") -> list[float]:
        from .corpus import document_text

        return self.embed(document_text(record))


class PrecomputedEmbeddingProvider:
    """Embeddings looked up by record id, typically loaded from a sidecar file.

    An optional fallback provider (e.g. HashEmbeddingProvider) handles keys
    that are not in the table, which lets offline runs embed free-text queries
    against a precomputed document index.
    """

    def __init__(
        self,
        vectors: dict[str, tuple[float, ...]],
        dim: int,
        fallback: "EmbeddingProvider | None" = None,
    ):
        self.vectors = vectors
        self.dim = dim
        self.fallback = fallback
        if fallback is not None and fallback.dim != dim:
            raise ValueError(f"fallback dim {fallback.dim} does not match table dim {dim}")
        for key, values in vectors.items():
            if len(values) != dim:
                raise ValueError(f"entry '{key}' has dim {len(values)}, expected {dim}")

    @classmethod
    def from_file(
        cls, path: str | Path, fallback: "EmbeddingProvider | None" = None
    ) -> "PrecomputedEmbeddingProvider":
        dim, vectors = read_embeddings(path)
        return cls(vectors, dim, fallback=fallback)

    def embed(self, text: str) -> Sequence[float]:
        if text in self.vectors:
            return self.vectors[text]
        if self.fallback is not None:
            return self.fallback.embed(text)
        raise RetrievalError(f"no embedding for record '{text}'")

    def embed_record(self, record: "PaperRecord") -> Sequence[float]:
        if record.id in self.vectors:
            return self.vectors[record.id]
        if self.fallback is not None:
            return self.fallback.embed_record(record)
        raise RetrievalError(f"no embedding for record '{record.id}'")


# --- sidecar file format -----------------------------------------------------
#
# Binary, little-endian: magic "SFEMB1", u32 dimension, u64 count, then per
# entry a u16 id length, the UTF-8 id bytes, and dimension float32 values.
# Bit-exact so indexes are portable across implementations.


def write_embeddings(
    path: str | Path, dim: int, entries: Iterable[tuple[str, Sequence[float]]]
) -> int:
    items = list(entries)
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<Q", len(items)))
        for record_id, values in items:
            raw_id = record_id.encode("utf-8")
            if len(raw_id) > 0xFFFF:
                raise ValueError(f"id too long for sidecar format: '{record_id[:40]}...'")
            if len(values) != dim:
                raise ValueError(f"entry '{record_id}' has dim {len(values)}, expected {dim}")
            fh.write(struct.pack("<H", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack(f"<{dim}f", *[float(v) for v in values]))
    return len(items)


def read_embeddings(path: str | Path) -> tuple[int, dict[str, tuple[float, ...]]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise RetrievalError(f"cannot read embedding sidecar {path}: {exc}") from exc
    if blob[: len(SIDECAR_MAGIC)] != SIDECAR_MAGIC:
        raise RetrievalError(f"{path} is not an embedding sidecar (bad magic)")
    offset = len(SIDECAR_MAGIC)
    (dim,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    (count,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    vectors: dict[str, tuple[float, ...]] = {}
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            record_id = blob[offset : offset + id_len].decode("utf-8")
            offset += id_len
            values = struct.unpack_from(f"<{dim}f", blob, offset)
            offset += 4 * dim
            vectors[record_id] = tuple(values)
    except struct.error as exc:
        raise RetrievalError(f"{path} is truncated: {exc}") from exc
    if len(vectors) != count:
        raise RetrievalError(f"{path} has duplicate ids")
    return dim, vectors

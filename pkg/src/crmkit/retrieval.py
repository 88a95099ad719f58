"""Metadata embedding and exact cosine top-k search over strong-tier templates."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .ingestion import (
    AggregatedPlanRecord,
    NO_VOUCHER,
    MessageTemplate,
    VoucherInfo,
    category_text,
    voucher_text,
)
from .kernels import fnv1a_codepoints, hashed_trigram_counts

DEFAULT_DIMENSION = 256
DEFAULT_MIN_SIMILARITY = 0.30
DEFAULT_TOP_K = 3
MIN_DIMENSION = 8


class EmptyTextError(ValueError):
    """Raised when asked to embed an empty string."""


class IndexBuildError(ValueError):
    pass


def serialize_metadata(category_path: Sequence[str], voucher: VoucherInfo | None) -> str:
    """``category: A > B | voucher_kind: K | voucher_value: V | min_spend: M``."""
    return f"category: {category_text(category_path)} | {voucher_text(voucher)}"


def record_metadata(record: AggregatedPlanRecord) -> str:
    """Canonical metadata text rebuilt from an aggregated record."""
    fp = record.voucher_fingerprint
    voucher_part = voucher_text(None) if fp == NO_VOUCHER else fp
    return f"category: {record.key.category} | {voucher_part}"


def hash_embed(canonical_text: str, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    """Signed character-trigram feature hashing, L2-normalised."""
    if dimension < MIN_DIMENSION:
        raise ValueError(f"dimension must be >= {MIN_DIMENSION}")
    if not canonical_text:
        raise EmptyTextError("cannot embed empty text")
    vec = hashed_trigram_counts(canonical_text, dimension)
    norm = float(np.sqrt(np.dot(vec, vec)))
    if norm == 0.0:
        # every bucket cancelled out; fall back to a one-hot on the whole-text hash
        h = fnv1a_codepoints(canonical_text)
        vec[h % dimension] = 1.0
        return vec
    return vec / norm


class Embedder(Protocol):
    dimension: int

    def __call__(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class HashEmbedder:
    dimension: int = DEFAULT_DIMENSION

    def __call__(self, text: str) -> np.ndarray:
        return hash_embed(text, self.dimension)


class EmbeddingCache:
    """Vectors keyed by sha256 of the embedded text; stored as ``.npz``."""

    def __init__(self, dimension: int) -> None:
        self.dimension = dimension
        self._vectors: dict[str, np.ndarray] = {}

    @staticmethod
    def text_key(text: str) -> str:
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self._vectors)

    def get_or_embed(self, text: str, embedder: Callable[[str], np.ndarray]) -> np.ndarray:
        key = self.text_key(text)
        vec = self._vectors.get(key)
        if vec is None:
            vec = np.asarray(embedder(text), dtype=np.float32)
            self._vectors[key] = vec
        return vec

    def save(self, path: str | Path) -> None:
        keys = sorted(self._vectors)
        matrix = (
            np.stack([self._vectors[k] for k in keys])
            if keys
            else np.zeros((0, self.dimension), dtype=np.float32)
        )
        with open(path, "wb") as fh:
            np.savez(fh, keys=np.array(keys, dtype="U64"), vectors=matrix)

    @classmethod
    def load(cls, path: str | Path, dimension: int) -> EmbeddingCache:
        cache = cls(dimension)
        with np.load(path) as data:
            if data["vectors"].shape[1:] != (dimension,):
                return cache
            for key, vec in zip(data["keys"], data["vectors"]):
                cache._vectors[str(key)] = vec.astype(np.float32)
        return cache


@dataclass(frozen=True)
class MetadataDoc:
    record_key: str
    canonical_text: str
    audience_segment: str
    merchant_id: str


@dataclass(frozen=True)
class RetrievalCandidate:
    record_key: str
    similarity: float
    template: MessageTemplate
    merchant_id: str


class VectorIndex:
    """Flat float32 index; read-only once built."""

    def __init__(
        self,
        keys: Sequence[str],
        merchants: Sequence[str],
        segments: Sequence[str],
        vectors: np.ndarray,
    ) -> None:
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(keys):
            raise IndexBuildError("vector matrix does not match entry count")
        if not len(keys) == len(merchants) == len(segments):
            raise IndexBuildError("entry metadata lengths differ")
        vectors.setflags(write=False)
        self.keys = tuple(keys)
        self.merchants = tuple(merchants)
        self.segments = tuple(segments)
        self.vectors = vectors
        self._merchants_arr = np.array(self.merchants, dtype=object)
        self._segments_arr = np.array(self.segments, dtype=object)

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.keys)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorIndex):
            return NotImplemented
        return (
            self.keys == other.keys
            and self.merchants == other.merchants
            and self.segments == other.segments
            and self.vectors.tobytes() == other.vectors.tobytes()
        )

    def mask(self, segment: str | None, exclude_merchant: str | None) -> np.ndarray:
        keep = np.ones(len(self.keys), dtype=bool)
        if segment is not None:
            keep &= self._segments_arr == segment
        if exclude_merchant is not None:
            keep &= self._merchants_arr != exclude_merchant
        return keep


def index_build(
    docs: Sequence[MetadataDoc],
    embedder: Embedder,
    cache: EmbeddingCache | None = None,
) -> VectorIndex:
    if not docs:
        raise IndexBuildError("cannot build an index from zero documents")
    rows = []
    for doc in docs:
        vec = cache.get_or_embed(doc.canonical_text, embedder) if cache else embedder(doc.canonical_text)
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (embedder.dimension,):
            raise IndexBuildError(
                f"embedding for {doc.record_key} has shape {vec.shape}, expected ({embedder.dimension},)"
            )
        rows.append(vec)
    return VectorIndex(
        [d.record_key for d in docs],
        [d.merchant_id for d in docs],
        [d.audience_segment for d in docs],
        np.stack(rows),
    )


def query_topk(
    index: VectorIndex,
    query: np.ndarray,
    k: int = DEFAULT_TOP_K,
    segment: str | None = None,
    exclude_merchant: str | None = None,
    templates: Mapping[str, MessageTemplate] | None = None,
) -> list[RetrievalCandidate]:
    """Exact cosine top-k among entries in ``segment`` from merchants other than ``exclude_merchant``.

    Results are ordered by (similarity desc, record_key asc). Templates are looked
    up in ``templates``; unknown keys get an empty template.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        return []
    q = np.asarray(query, dtype=np.float32).astype(np.float64)
    if q.shape != (index.dimension,):
        raise ValueError(f"query has shape {q.shape}, index dimension is {index.dimension}")
    qn = float(np.linalg.norm(q))
    idx = np.flatnonzero(index.mask(segment, exclude_merchant))
    if idx.size == 0 or qn == 0.0:
        return []
    mat = index.vectors[idx].astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    sims = (mat @ q) / np.where(norms == 0.0, 1.0, norms * qn)
    order = sorted(range(idx.size), key=lambda j: (-sims[j], index.keys[idx[j]]))[:k]
    templates = templates or {}
    empty = MessageTemplate("", "")
    out = []
    for j in order:
        i = int(idx[j])
        key = index.keys[i]
        out.append(
            RetrievalCandidate(
                record_key=key,
                similarity=float(min(1.0, max(-1.0, sims[j]))),
                template=templates.get(key, empty),
                merchant_id=index.merchants[i],
            )
        )
    return out


def filter_valid(candidates: Iterable[RetrievalCandidate], min_similarity: float = DEFAULT_MIN_SIMILARITY) -> list[RetrievalCandidate]:
    return [
        c
        for c in candidates
        if c.template.title.strip() and c.template.body.strip() and c.similarity >= min_similarity
    ]


def docs_for_records(records: Iterable[AggregatedPlanRecord]) -> list[MetadataDoc]:
    return [
        MetadataDoc(r.key.as_str(), record_metadata(r), r.audience_segment, r.merchant_id)
        for r in records
    ]


# --- index file --------------------------------------------------------------
# header: magic, u32 dimension, u32 entry count
# entry:  3 length-prefixed UTF-8 strings (key, merchant, segment), then d float32 (LE)

_MAGIC = b"CRMIDX1\0"


def _write_str(fh: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated index file")
    return data


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def write_index(index: VectorIndex, path: str | Path) -> None:
    le = index.vectors.astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", index.dimension, len(index)))
        for i, key in enumerate(index.keys):
            _write_str(fh, key)
            _write_str(fh, index.merchants[i])
            _write_str(fh, index.segments[i])
            fh.write(le[i].tobytes())


def read_index(path: str | Path) -> VectorIndex:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not an index file")
        dimension, count = struct.unpack("<II", _read_exact(fh, 8))
        keys, merchants, segments = [], [], []
        vectors = np.zeros((count, dimension), dtype=np.float32)
        for i in range(count):
            keys.append(_read_str(fh))
            merchants.append(_read_str(fh))
            segments.append(_read_str(fh))
            vectors[i] = np.frombuffer(_read_exact(fh, 4 * dimension), dtype="<f4")
        if fh.read(1):
            raise ValueError("trailing bytes in index file")
    return VectorIndex(keys, merchants, segments, vectors)

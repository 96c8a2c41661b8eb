"""Binary embedding cache written once by ``embed`` and read by ``eval``.

Layout (little endian)::

    b"BCACHE1"
    u32 feature_dim, u32 count
    str feature_source            (u32 length + UTF-8)
    32 bytes encoder checkpoint sha256 (zeros when feature_source == "imported")
    count x [str id, str instrument, str taxon, str split, feature_dim x f32]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import Reader, atomic_write_bytes, file_digest, pack_str
from .fewshot import LabelledEmbeddings

CACHE_MAGIC = b"BCACHE1"
IMPORTED = "imported"
NO_DIGEST = bytes(32)


class IntegrityError(Exception):
    """An artifact does not match the artifact it claims to derive from."""


@dataclass
class EmbeddingCache:
    feature_source: str
    digest: bytes
    ids: list[str]
    instruments: list[str]
    taxa: list[str]
    splits: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype="<f4")
        n = len(self.ids)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != n:
            raise ValueError("cache vectors must be a (count, feature_dim) matrix")
        if not (len(self.instruments) == len(self.taxa) == len(self.splits) == n):
            raise ValueError("cache record fields have mismatched lengths")
        if len(self.digest) != 32:
            raise ValueError("digest must be 32 bytes")
        if not np.isfinite(self.vectors).all():
            raise ValueError("cache vectors must be finite")

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def select(self, split: str) -> LabelledEmbeddings:
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return LabelledEmbeddings(
            [self.ids[i] for i in idx], self.vectors[idx].astype(np.float64), [self.taxa[i] for i in idx]
        )

    def to_bytes(self) -> bytes:
        parts = [CACHE_MAGIC, struct.pack("<II", self.feature_dim, len(self)), pack_str(self.feature_source),
                 self.digest]
        for i in range(len(self)):
            parts += [pack_str(self.ids[i]), pack_str(self.instruments[i]), pack_str(self.taxa[i]),
                      pack_str(self.splits[i]), self.vectors[i].tobytes()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, name: str = "<cache>") -> "EmbeddingCache":
        r = Reader(data, name)
        if r.take(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{name}: not an embedding cache (bad magic)")
        dim, count = struct.unpack("<II", r.take(8))
        source = r.str()
        digest = r.take(32)
        ids, insts, taxa, splits = [], [], [], []
        vectors = np.empty((count, dim), dtype="<f4")
        for i in range(count):
            ids.append(r.str())
            insts.append(r.str())
            taxa.append(r.str())
            splits.append(r.str())
            vectors[i] = np.frombuffer(r.take(4 * dim), dtype="<f4")
        if not r.at_end():
            raise ValueError(f"{name}: trailing bytes after {count} records")
        return cls(source, digest, ids, insts, taxa, splits, vectors)


def write_cache(cache: EmbeddingCache, path: str | Path) -> None:
    atomic_write_bytes(path, cache.to_bytes())


def read_cache(path: str | Path) -> EmbeddingCache:
    return EmbeddingCache.from_bytes(Path(path).read_bytes(), str(path))


def verify_cache(cache: EmbeddingCache, checkpoint: str | Path | None) -> None:
    """Refuse a cache that was not produced by ``checkpoint``."""
    if cache.feature_source == IMPORTED:
        return
    if checkpoint is None or not Path(checkpoint).exists():
        raise IntegrityError(f"cache for {cache.feature_source!r} has no checkpoint to verify against")
    if file_digest(checkpoint) != cache.digest:
        raise IntegrityError(
            f"cache digest for {cache.feature_source!r} does not match checkpoint {checkpoint}; re-run embed"
        )

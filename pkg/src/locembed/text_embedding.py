"""Frozen text embeddings: the ``GEMB`` vector file, dimension truncation and a hashing fallback.

Vectors for real runs come from any external sentence-embedding model. The
expected handshake is: write descriptions (one per line) with ``locembed
prepare``, embed them offline, store the result with :func:`write_embeddings`
(or any writer producing the same bytes), then load it here.

File layout, little-endian::

    b"GEMB" | u32 version=1 | u32 count | u32 dim | count*dim float32, row-major

with a sidecar text file holding one UTF-8 id per line in row order.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

MAGIC = b"GEMB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
DEFAULT_DIM = 384


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EmbeddingStore:
    """Id-indexed table of equal-length vectors.

    ``vectors`` row ``i`` belongs to ``ids[i]``. Stored as ``float64`` in memory;
    the file format is ``float32`` so :func:`load_embeddings` values are exactly
    representable.
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    source_tag: str = "external"

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(self.ids):
            raise ValueError(f"vectors of shape {vec.shape} do not match {len(self.ids)} ids")
        if vec.shape[1] < 1:
            raise ValueError("embedding dimension must be positive")
        bad = np.flatnonzero(~np.all(np.isfinite(vec), axis=1))
        if bad.size:
            raise ValueError(f"non-finite component in vector for id {self.ids[int(bad[0])]!r}")
        index = {}
        for i, key in enumerate(self.ids):
            if key in index:
                raise ValueError(f"duplicate id {key!r}")
            index[key] = i
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "_index", index)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __getitem__(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]

    def lookup(self, keys: Sequence[str]) -> np.ndarray:
        missing = [k for k in keys if k not in self._index]
        if missing:
            raise KeyError(f"no text embedding for id {missing[0]!r} ({len(missing)} missing)")
        return self.vectors[[self._index[k] for k in keys]]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.vectors, other.vectors)

    @classmethod
    def from_mapping(cls, entries: Mapping[str, Sequence[float]], source_tag: str = "external") -> "EmbeddingStore":
        ids = tuple(entries)
        return cls(ids, np.array([entries[k] for k in ids], dtype=np.float64), source_tag)


def write_embeddings(store: EmbeddingStore, vector_path: str | Path, id_path: str | Path) -> None:
    for key in store.ids:
        if "\n" in key or "\r" in key:
            raise ValueError(f"id {key!r} contains a line break")
    payload = np.ascontiguousarray(store.vectors, dtype="<f4")
    with Path(vector_path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(store), store.dim))
        fh.write(payload.tobytes())
    Path(id_path).write_text("".join(f"{k}\n" for k in store.ids), encoding="utf-8")


def load_embeddings(vector_path: str | Path, id_path: str | Path, source_tag: str = "external") -> EmbeddingStore:
    raw = Path(vector_path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"{vector_path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{vector_path}: magic mismatch (got {magic!r})")
    if version != VERSION:
        raise EmbeddingFormatError(f"{vector_path}: unsupported format version {version}")
    if dim == 0:
        raise EmbeddingFormatError(f"{vector_path}: dim must be positive")
    need = count * dim * 4
    body = raw[_HEADER.size:]
    if len(body) < need:
        raise EmbeddingFormatError(f"{vector_path}: truncated payload ({len(body)} of {need} bytes)")
    if len(body) > need:
        raise EmbeddingFormatError(f"{vector_path}: {len(body) - need} trailing bytes after payload")
    vectors = np.frombuffer(body, dtype="<f4").reshape(count, dim).astype(np.float64)

    ids = Path(id_path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise EmbeddingFormatError(f"{id_path}: {len(ids)} ids for {count} vectors")
    seen: set[str] = set()
    for line_no, key in enumerate(ids, start=1):
        if key in seen:
            raise EmbeddingFormatError(f"{id_path}: duplicate id {key!r} on line {line_no}")
        seen.add(key)
    bad = np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))
    if bad.size:
        raise EmbeddingFormatError(f"{vector_path}: NaN or infinite component in row {int(bad[0])} "
                                   f"(id {ids[int(bad[0])]!r})")
    return EmbeddingStore(tuple(ids), vectors, source_tag)


def truncate_dims(store: EmbeddingStore, k: int) -> EmbeddingStore:
    """Keep the leading ``k`` components of every vector."""
    if k < 1 or k > store.dim:
        raise ValueError(f"cannot truncate dim-{store.dim} embeddings to {k}")
    if k == store.dim:
        return store
    return EmbeddingStore(store.ids, store.vectors[:, :k].copy(), store.source_tag)


def l2_normalize_store(store: EmbeddingStore) -> EmbeddingStore:
    norms = np.linalg.norm(store.vectors, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm embedding for id {store.ids[int(zero[0])]!r}")
    return EmbeddingStore(store.ids, store.vectors / norms[:, None], store.source_tag)


_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN.findall(text)]


def _bucket(token: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little", signed=True)).digest()
    h = int.from_bytes(digest, "little")
    return (h >> 1) % dim, (1.0 if h & 1 else -1.0)


def fallback_encode(text: str, dim: int = DEFAULT_DIM, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of lower-cased word tokens, L2-normalized.

    A stand-in for a sentence encoder in tests and demos: deterministic and
    lexically similar texts land close together, nothing more.
    """
    if dim < 8:
        raise ValueError("fallback embeddings need dim >= 8")
    tokens = tokenize(text)
    if not tokens:
        raise ValueError(f"text {text!r} has no tokens")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        idx, sign = _bucket(tok, dim, seed)
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token collided and cancelled; fall back to the first token alone
        idx, sign = _bucket(tokens[0], dim, seed)
        vec[idx] = sign
        norm = 1.0
    return vec / norm


def fallback_store(keys: Iterable[str], texts: Iterable[str], dim: int = DEFAULT_DIM, seed: int = 0) -> EmbeddingStore:
    keys = tuple(keys)
    vectors = np.array([fallback_encode(t, dim, seed) for t in texts], dtype=np.float64).reshape(len(keys), dim)
    return EmbeddingStore(keys, vectors, "fallback")


class HashingTextEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer wrapping :func:`fallback_encode` for a list of strings."""

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.dim < 8:
            raise ValueError("fallback embeddings need dim >= 8")
        return self

    def transform(self, X) -> np.ndarray:
        return np.array([fallback_encode(t, self.dim, self.seed) for t in X], dtype=np.float64).reshape(-1, self.dim)

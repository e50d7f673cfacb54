"""HNSW approximate nearest-neighbour index over euclidean distance.

Graph construction and search run in :mod:`vpg.kernels`; this module owns
keys, parameters, persistence and the exact-scan twin used as an oracle.
"""

from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from . import kernels
from .core import ImageSignature
from .errors import DimensionError

MAGIC = b"VPGA1"
_HEADER = struct.Struct("<IIIIQiiI")


@dataclass(frozen=True)
class HnswParams:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    seed: int = 100

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef values must be positive")


def _key_to_json(key):
    if isinstance(key, ImageSignature):
        return {"sig": key.hex()}
    if isinstance(key, tuple):
        return {"tuple": [_key_to_json(k) for k in key]}
    return key


def _key_from_json(obj):
    if isinstance(obj, dict):
        if "sig" in obj:
            return ImageSignature.from_hex(obj["sig"])
        return tuple(_key_from_json(k) for k in obj["tuple"])
    return obj


class _Counter:
    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def add(self, n: int = 1) -> None:
        with self._lock:
            self._n += n

    @property
    def value(self) -> int:
        return self._n


def collapse_duplicates(vectors: np.ndarray) -> np.ndarray:
    """Map each row to the id of its distinct vector (ids in first-seen order)."""
    group_of = np.empty(len(vectors), dtype=np.int32)
    seen: dict[bytes, int] = {}
    for i, row in enumerate(vectors):
        group_of[i] = seen.setdefault(row.tobytes(), len(seen))
    return group_of


class AnnIndex:
    """Immutable HNSW graph plus the keys of its rows.

    Rows with bit-identical vectors share one graph node: a graph whose nodes
    sit in large zero-distance clusters spends its link budget inside each
    cluster and stops being navigable.  ``group_of`` maps row -> node.
    """

    def __init__(
        self,
        keys: Sequence[Hashable],
        vectors: np.ndarray,
        links,
        counts,
        entry: int,
        max_level: int,
        params: HnswParams,
        group_of: np.ndarray | None = None,
    ):
        self.keys = list(keys)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.links = links
        self.counts = counts
        self.entry = entry
        self.max_level = max_level
        self.params = params
        self.queries = _Counter()
        self._row = {k: i for i, k in enumerate(self.keys)}
        if group_of is None:
            group_of = np.arange(len(self.keys), dtype=np.int32)
        self.group_of = np.ascontiguousarray(group_of, dtype=np.int32)
        n_nodes = int(self.group_of.max()) + 1 if len(self.group_of) else 0
        self.members: list[list[int]] = [[] for _ in range(n_nodes)]
        for row, g in enumerate(self.group_of.tolist()):
            self.members[g].append(row)
        self.node_vectors = np.ascontiguousarray(self.vectors[[m[0] for m in self.members]]) if n_nodes else self.vectors

    @property
    def n_nodes(self) -> int:
        return len(self.members)

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, key) -> np.ndarray:
        return self.vectors[self._row[key]]

    def __contains__(self, key) -> bool:
        return key in self._row

    def _check(self, q: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=np.float32)
        if q.ndim == 1:
            q = q[None, :]
        if len(self) and q.shape[1] != self.dim:
            raise DimensionError(f"query has dimension {q.shape[1]}, index has {self.dim}")
        return q

    def search_batch(self, queries, k: int, ef_search: int | None = None) -> list[list[tuple[Hashable, float]]]:
        """One graph pass per query row; results ascending by (distance, row)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._check(queries)
        self.queries.add(q.shape[0])
        if not len(self):
            return [[] for _ in range(q.shape[0])]
        ef = self.params.ef_search if ef_search is None else ef_search
        k_nodes = min(k, self.n_nodes)
        ids, dists = kernels.hnsw_search(self.node_vectors, self.links, self.counts, self.entry, self.max_level, q, k_nodes, max(ef, k_nodes))
        out = []
        for row_ids, row_d in zip(ids, dists):
            hits: list[tuple[Hashable, float]] = []
            for g, d in zip(row_ids.tolist(), row_d.tolist()):
                if g < 0:
                    break
                for r in self.members[g]:
                    hits.append((self.keys[r], float(d)))
                if len(hits) >= k:
                    break
            out.append(hits[:k])
        return out

    def search(self, q, k: int, ef_search: int | None = None) -> list[tuple[Hashable, float]]:
        return self.search_batch(q, k, ef_search)[0]

    def save(self, path: str | Path) -> None:
        keys_blob = json.dumps([_key_to_json(k) for k in self.keys]).encode()
        n = len(self)
        dim = self.vectors.shape[1] if n else 0
        cap = self.links.shape[2] if self.links.ndim == 3 else 2 * self.params.M
        levels = self.counts.shape[0] if n else 0
        nodes = self.n_nodes
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_HEADER.pack(dim, self.params.M, self.params.ef_construction, self.params.ef_search, n, self.entry, self.max_level, cap))
            fh.write(struct.pack("<QII", self.params.seed, levels, nodes))
            fh.write(np.ascontiguousarray(self.group_of, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.counts, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.links, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())
            fh.write(struct.pack("<Q", len(keys_blob)))
            fh.write(keys_blob)

    @classmethod
    def load(cls, path: str | Path) -> "AnnIndex":
        raw = Path(path).read_bytes()
        if raw[:5] != MAGIC:
            raise ValueError(f"{path}: not a VPGA1 index file")
        pos = 5
        dim, M, efc, efs, n, entry, max_level, cap = _HEADER.unpack_from(raw, pos)
        pos += _HEADER.size
        seed, levels, nodes = struct.unpack_from("<QII", raw, pos)
        pos += 16

        def take(dtype, count, shape):
            nonlocal pos
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape)
            pos += arr.nbytes
            return np.ascontiguousarray(arr.astype(dtype.lstrip("<")))

        group_of = take("<i4", n, (n,))
        counts = take("<i4", levels * nodes, (levels, nodes))
        links = take("<i4", levels * nodes * cap, (levels, nodes, cap))
        vectors = take("<f4", n * dim, (n, dim))
        (klen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        keys = [_key_from_json(k) for k in json.loads(raw[pos : pos + klen])]
        return cls(keys, vectors, links, counts, entry, max_level, HnswParams(M, efc, efs, seed), group_of)


def draw_levels(n: int, M: int, seed: int) -> np.ndarray:
    """Geometric layer assignment with normalisation 1/ln(M)."""
    u = np.random.default_rng(seed).random(n)
    u = np.where(u == 0.0, np.finfo(float).tiny, u)
    return np.floor(-np.log(u) / math.log(M)).astype(np.int32)


def build_ann(entries: Iterable[tuple[Hashable, np.ndarray]], params: HnswParams | None = None, **overrides) -> AnnIndex:
    """Build an index from ``(key, embedding)`` pairs, inserted in the given order."""
    params = params or HnswParams(**overrides)
    keys, rows = [], []
    dim = None
    for key, emb in entries:
        v = np.asarray(emb, dtype=np.float32).reshape(-1)
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise DimensionError(f"entry {key!r} has dimension {v.shape[0]}, expected {dim}")
        keys.append(key)
        rows.append(v)
    vectors = np.ascontiguousarray(np.stack(rows) if rows else np.zeros((0, 0)), dtype=np.float32)
    if len(set(keys)) != len(keys):
        raise ValueError("index keys must be unique")
    group_of = collapse_duplicates(vectors)
    n_nodes = int(group_of.max()) + 1 if len(keys) else 0
    first = np.unique(group_of, return_index=True)[1] if len(keys) else np.zeros(0, dtype=np.int64)
    nodes = np.ascontiguousarray(vectors[first]) if len(keys) else vectors
    levels = draw_levels(n_nodes, params.M, params.seed)
    links, counts, entry, max_level = kernels.hnsw_build(nodes, levels, params.M, params.ef_construction)
    return AnnIndex(keys, vectors, links, counts, entry, max_level, params, group_of)


def query_ann(index: AnnIndex, q, k: int, ef_search: int | None = None) -> list[tuple[Hashable, float]]:
    return index.search(q, k, ef_search)


class ExactIndex:
    """Brute-force scan with the same query surface as :class:`AnnIndex`."""

    def __init__(self, keys: Sequence[Hashable], vectors: np.ndarray):
        self.keys = list(keys)
        self.vectors = np.asarray(vectors, dtype=np.float64).reshape(len(self.keys), -1)
        self.queries = _Counter()

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[Hashable, np.ndarray]]) -> "ExactIndex":
        pairs = list(entries)
        if not pairs:
            return cls([], np.zeros((0, 0)))
        return cls([k for k, _ in pairs], np.stack([np.asarray(v, dtype=np.float64) for _, v in pairs]))

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def search_batch(self, queries, k: int, ef_search: int | None = None) -> list[list[tuple[Hashable, float]]]:
        q = np.asarray(queries, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        self.queries.add(q.shape[0])
        if not len(self):
            return [[] for _ in range(q.shape[0])]
        if q.shape[1] != self.dim:
            raise DimensionError(f"query has dimension {q.shape[1]}, index has {self.dim}")
        out = []
        for row in q:
            d = np.sqrt(np.sum((self.vectors - row) ** 2, axis=1))
            order = np.lexsort((np.arange(len(d)), d))[:k]
            out.append([(self.keys[i], float(d[i])) for i in order])
        return out

    def search(self, q, k: int, ef_search: int | None = None) -> list[tuple[Hashable, float]]:
        return self.search_batch(q, k, ef_search)[0]

"""Persistent signature -> features store.

Layout on disk::

    DIR/MANIFEST            JSON: format version, ordered segment list
    DIR/segments/NNNNNN.log append-only records

Each record is ``u32 length | u32 crc32 | payload`` where the payload starts
with a one-byte schema tag.  The newest record for a signature wins; an
in-memory map points every live signature at its record.  Segments roll at a
size threshold and are compacted once dead bytes dominate.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
import zlib
from concurrent.futures import Future
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .core import (
    TAXONOMY,
    BoundingBox,
    DetectedObject,
    Embedding,
    ImageMetadata,
    ImageSignature,
    as_embedding,
    category,
    decode_b64,
    encode_b64,
    quantize,
)
from .errors import ExtractionError, StoreError

log = logging.getLogger(__name__)

SCHEMA_V1 = 1
SOURCES = ("backfill", "stream", "online_fallback")
_CATEGORY_NAMES = sorted(TAXONOMY)
_CATEGORY_CODE = {name: i for i, name in enumerate(_CATEGORY_NAMES)}
_REC_HEADER = struct.Struct("<II")
_FIXED = struct.Struct("<B16sqBH")
_OBJ = struct.Struct("<ffffBf")


@dataclass(frozen=True, eq=False)
class SceneEntry:
    signature: ImageSignature
    full_embedding: Embedding
    objects: tuple[DetectedObject, ...] = ()
    ingested_at: int = 0
    source: str = "backfill"
    metadata: ImageMetadata | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        object.__setattr__(self, "objects", tuple(self.objects))

    def __eq__(self, other):
        if not isinstance(other, SceneEntry):
            return NotImplemented
        return (
            self.signature == other.signature
            and np.array_equal(self.full_embedding, other.full_embedding)
            and self.objects == other.objects
            and self.ingested_at == other.ingested_at
            and self.source == other.source
            and self.metadata == other.metadata
        )

    __hash__ = None

    def quantized(self) -> "SceneEntry":
        """The entry as it reads back from disk (half-precision embeddings)."""
        objs = tuple(
            DetectedObject(
                BoundingBox(*(float(np.float32(v)) for v in o.box.as_list())),
                o.category,
                float(np.float32(o.confidence)),
                quantize(o.embedding),
            )
            for o in self.objects
        )
        return replace(self, full_embedding=quantize(self.full_embedding), objects=objs)


def scene_to_json(entry: SceneEntry) -> dict:
    out = {
        "signature": entry.signature.hex(),
        "full_embedding": encode_b64(entry.full_embedding),
        "objects": [
            {
                "box": o.box.as_list(),
                "category": o.category.name,
                "confidence": o.confidence,
                "embedding": encode_b64(o.embedding),
            }
            for o in entry.objects
        ],
        "source": entry.source,
    }
    if entry.ingested_at:
        out["ingested_at"] = entry.ingested_at
    if entry.metadata is not None:
        out["metadata"] = entry.metadata.to_dict()
    return out


def scene_from_json(d: dict) -> SceneEntry:
    objects = tuple(
        DetectedObject(
            box=BoundingBox.from_list(o["box"]),
            category=category(o["category"]),
            confidence=float(o["confidence"]),
            embedding=decode_b64(o["embedding"]),
        )
        for o in d.get("objects", [])
    )
    meta = d.get("metadata")
    return SceneEntry(
        signature=ImageSignature.from_hex(d["signature"]),
        full_embedding=decode_b64(d["full_embedding"]),
        objects=objects,
        ingested_at=int(d.get("ingested_at", 0)),
        source=d.get("source", "backfill"),
        metadata=ImageMetadata.from_dict(meta) if meta is not None else None,
    )


def read_scenes_jsonl(path: str | os.PathLike) -> Iterator[SceneEntry]:
    """Yield entries from a JSONL file; bad lines raise ValueError naming the line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield scene_from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed scene record ({exc})") from exc


def encode_entry(entry: SceneEntry) -> bytes:
    emb = np.asarray(entry.full_embedding, dtype="<f2")
    parts = [
        _FIXED.pack(SCHEMA_V1, entry.signature.digest, entry.ingested_at, SOURCES.index(entry.source), emb.shape[0]),
        emb.tobytes(),
        struct.pack("<H", len(entry.objects)),
    ]
    for o in entry.objects:
        b = o.box
        parts.append(_OBJ.pack(b.x, b.y, b.w, b.h, _CATEGORY_CODE[o.category.name], o.confidence))
        parts.append(np.asarray(o.embedding, dtype="<f2").tobytes())
    meta = b"" if entry.metadata is None else json.dumps(entry.metadata.to_dict(), sort_keys=True).encode()
    parts.append(struct.pack("<H", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def decode_entry(payload: bytes) -> SceneEntry:
    tag = payload[0]
    if tag != SCHEMA_V1:
        raise StoreError(f"unsupported value schema tag {tag}")
    _, digest, ingested_at, source, dim = _FIXED.unpack_from(payload, 0)
    pos = _FIXED.size
    full = as_embedding(np.frombuffer(payload, dtype="<f2", count=dim, offset=pos))
    pos += 2 * dim
    (n_obj,) = struct.unpack_from("<H", payload, pos)
    pos += 2
    objects = []
    for _ in range(n_obj):
        x, y, w, h, code, conf = _OBJ.unpack_from(payload, pos)
        pos += _OBJ.size
        emb = as_embedding(np.frombuffer(payload, dtype="<f2", count=dim, offset=pos))
        pos += 2 * dim
        objects.append(DetectedObject(BoundingBox(x, y, w, h), TAXONOMY[_CATEGORY_NAMES[code]], conf, emb))
    (meta_len,) = struct.unpack_from("<H", payload, pos)
    pos += 2
    meta = ImageMetadata.from_dict(json.loads(payload[pos : pos + meta_len])) if meta_len else None
    return SceneEntry(ImageSignature(digest), full, tuple(objects), ingested_at, SOURCES[source], meta)


@dataclass
class StoreMetrics:
    lookups: int = 0
    hits: int = 0
    fallback_extractions: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def misses(self) -> int:
        return self.lookups - self.hits

    @property
    def hit_rate(self) -> float | None:
        return self.hits / self.lookups if self.lookups else None

    def record(self, hit: bool) -> None:
        with self._lock:
            self.lookups += 1
            if hit:
                self.hits += 1

    def record_extraction(self) -> None:
        with self._lock:
            self.fallback_extractions += 1

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "lookups": self.lookups,
                "hits": self.hits,
                "misses": self.lookups - self.hits,
                "fallback_extractions": self.fallback_extractions,
                "hit_rate": self.hits / self.lookups if self.lookups else None,
            }


@dataclass(frozen=True)
class _Loc:
    segment: int
    offset: int
    length: int


class FeatureStore:
    """Thread-safe persistent store of :class:`SceneEntry` values."""

    def __init__(
        self,
        directory: str | os.PathLike,
        *,
        segment_max_bytes: int = 64 << 20,
        compact_min_bytes: int = 8 << 20,
        compact_dead_ratio: float = 0.5,
        sync: bool = False,
        clock: Callable[[], float] = time.time,
    ):
        self.dir = Path(directory)
        self.segment_max_bytes = segment_max_bytes
        self.compact_min_bytes = compact_min_bytes
        self.compact_dead_ratio = compact_dead_ratio
        self.sync = sync
        self.clock = clock
        self.metrics = StoreMetrics()
        self._lock = threading.RLock()
        self._index: dict[ImageSignature, _Loc] = {}
        self._fds: dict[int, int] = {}
        self._segments: list[int] = []
        self._sizes: dict[int, int] = {}
        self._live_bytes = 0
        self._inflight: dict[ImageSignature, Future] = {}
        self._closed = False
        try:
            (self.dir / "segments").mkdir(parents=True, exist_ok=True)
            self._recover()
        except OSError as exc:
            raise StoreError(f"cannot open store at {self.dir}: {exc}") from exc

    # -- lifecycle -----------------------------------------------------

    def _segment_path(self, seg: int) -> Path:
        return self.dir / "segments" / f"{seg:06d}.log"

    def _write_manifest(self) -> None:
        tmp = self.dir / "MANIFEST.tmp"
        tmp.write_text(json.dumps({"format": 1, "segments": [f"{s:06d}.log" for s in self._segments]}))
        os.replace(tmp, self.dir / "MANIFEST")

    def _recover(self) -> None:
        manifest = self.dir / "MANIFEST"
        if manifest.exists():
            names = json.loads(manifest.read_text())["segments"]
            self._segments = [int(n.split(".")[0]) for n in names]
        if not self._segments:
            self._segments = [1]
            self._write_manifest()
        for seg in self._segments:
            path = self._segment_path(seg)
            fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            self._fds[seg] = fd
            self._sizes[seg] = self._replay(seg, fd)
        self._live_bytes = sum(loc.length for loc in self._index.values())

    def _replay(self, seg: int, fd: int) -> int:
        size = os.fstat(fd).st_size
        data = os.pread(fd, size, 0) if size else b""
        pos = 0
        while pos + _REC_HEADER.size <= size:
            length, crc = _REC_HEADER.unpack_from(data, pos)
            start = pos + _REC_HEADER.size
            payload = data[start : start + length]
            if len(payload) < length or zlib.crc32(payload) != crc:
                break
            self._index[ImageSignature(payload[1:17])] = _Loc(seg, pos, _REC_HEADER.size + length)
            pos = start + length
        if pos != size:
            log.warning("truncating torn tail of segment %06d at byte %d (size %d)", seg, pos, size)
            os.ftruncate(fd, pos)
        return pos

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            for fd in self._fds.values():
                try:
                    os.fsync(fd)
                except OSError:
                    pass
                os.close(fd)
            self._fds.clear()
            self._closed = True

    def __enter__(self) -> "FeatureStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, sig: ImageSignature) -> bool:
        return sig in self._index

    # -- writes --------------------------------------------------------

    def _now_ms(self) -> int:
        return int(self.clock() * 1000)

    def _stamp(self, entry: SceneEntry, source: str | None) -> SceneEntry:
        return replace(
            entry.quantized(),
            ingested_at=entry.ingested_at or self._now_ms(),
            source=source or entry.source,
        )

    def _append(self, records: list[tuple[ImageSignature, bytes]]) -> None:
        """Append framed payloads to the active segment and publish their locations."""
        if self._closed:
            raise StoreError("store is closed")
        seg = self._segments[-1]
        if self._sizes[seg] >= self.segment_max_bytes:
            seg = self._roll()
        fd = self._fds[seg]
        pos = self._sizes[seg]
        chunks, locs = [], []
        for sig, payload in records:
            frame = _REC_HEADER.pack(len(payload), zlib.crc32(payload)) + payload
            chunks.append(frame)
            locs.append((sig, _Loc(seg, pos, len(frame))))
            pos += len(frame)
        blob = b"".join(chunks)
        written = 0
        while written < len(blob):
            written += os.pwrite(fd, blob[written:], self._sizes[seg] + written)
        if self.sync:
            os.fsync(fd)
        self._sizes[seg] = pos
        for sig, loc in locs:
            old = self._index.get(sig)
            if old is not None:
                self._live_bytes -= old.length
            self._index[sig] = loc
            self._live_bytes += loc.length

    def _roll(self) -> int:
        seg = self._segments[-1] + 1
        self._fds[seg] = os.open(self._segment_path(seg), os.O_RDWR | os.O_CREAT, 0o644)
        self._sizes[seg] = 0
        self._segments.append(seg)
        self._write_manifest()
        return seg

    def backfill(self, entries: Iterable[SceneEntry], batch_bytes: int = 4 << 20) -> int:
        """Bulk-load entries; returns how many were written."""
        written = 0
        batch: list[tuple[ImageSignature, bytes]] = []
        size = 0
        try:
            for entry in entries:
                entry = self._stamp(entry, "backfill")
                payload = encode_entry(entry)
                batch.append((entry.signature, payload))
                size += len(payload)
                if size >= batch_bytes:
                    with self._lock:
                        self._append(batch)
                    written += len(batch)
                    batch, size = [], 0
            if batch:
                with self._lock:
                    self._append(batch)
                written += len(batch)
        except OSError as exc:
            raise StoreError(f"backfill failed after {written} entries: {exc}", written) from exc
        self.maybe_compact()
        return written

    def apply_update(self, entry: SceneEntry, source: str = "stream") -> SceneEntry:
        """Write one entry; it is visible to :meth:`get` when this returns."""
        entry = self._stamp(replace(entry, ingested_at=0), source)
        try:
            with self._lock:
                self._append([(entry.signature, encode_entry(entry))])
        except OSError as exc:
            raise StoreError(f"update failed: {exc}") from exc
        self.maybe_compact()
        return entry

    # -- reads ---------------------------------------------------------

    def _read(self, loc: _Loc) -> SceneEntry:
        frame = os.pread(self._fds[loc.segment], loc.length, loc.offset)
        length, crc = _REC_HEADER.unpack_from(frame, 0)
        payload = frame[_REC_HEADER.size :]
        if len(payload) != length or zlib.crc32(payload) != crc:
            raise StoreError(f"corrupt record in segment {loc.segment} at {loc.offset}")
        return decode_entry(payload)

    def get(self, sig: ImageSignature) -> SceneEntry | None:
        loc = self._index.get(sig)
        if loc is None:
            return None
        try:
            return self._read(loc)
        except OSError as exc:
            raise StoreError(f"read failed: {exc}") from exc

    def get_or_extract(self, sig: ImageSignature, extractor: Callable[[ImageSignature], SceneEntry]) -> tuple[SceneEntry, bool]:
        """Return ``(entry, hit)``; on a miss run ``extractor`` once and write the result back."""
        entry = self.get(sig)
        if entry is not None:
            self.metrics.record(True)
            return entry, True
        self.metrics.record(False)
        with self._lock:
            fut = self._inflight.get(sig)
            owner = fut is None
            if owner:
                entry = self.get(sig)
                if entry is not None:  # written between our miss and taking the lock
                    return entry, False
                fut = Future()
                self._inflight[sig] = fut
        if not owner:
            return fut.result(), False
        try:
            self.metrics.record_extraction()
            try:
                produced = extractor(sig)
            except Exception as exc:
                raise ExtractionError(f"feature extraction failed for {sig}: {exc}") from exc
            produced = self.apply_update(replace(produced, signature=sig), source="online_fallback")
            fut.set_result(produced)
            return produced, False
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        finally:
            with self._lock:
                self._inflight.pop(sig, None)

    def signatures(self) -> list[ImageSignature]:
        return sorted(self._index)

    def scan(self, predicate: Callable[[SceneEntry], bool] | None = None) -> Iterator[SceneEntry]:
        """Yield matching entries in ascending signature order."""
        for sig in self.signatures():
            entry = self.get(sig)
            if entry is not None and (predicate is None or predicate(entry)):
                yield entry

    # -- maintenance ---------------------------------------------------

    def stats(self) -> dict:
        with self._lock:
            total = sum(self._sizes.values())
            return {
                "entries": len(self._index),
                "segments": len(self._segments),
                "total_bytes": total,
                "live_bytes": self._live_bytes,
                "dead_bytes": total - self._live_bytes,
                **self.metrics.snapshot(),
            }

    def maybe_compact(self) -> bool:
        with self._lock:
            total = sum(self._sizes.values())
            dead = total - self._live_bytes
            if total < self.compact_min_bytes or dead < self.compact_dead_ratio * total:
                return False
            self.compact()
            return True

    def compact(self) -> None:
        """Rewrite live records into a fresh segment and retire the old ones."""
        with self._lock:
            old = list(self._segments)
            seg = old[-1] + 1
            fd = os.open(self._segment_path(seg), os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            pos = 0
            moved = {}
            for sig in sorted(self._index):
                loc = self._index[sig]
                frame = os.pread(self._fds[loc.segment], loc.length, loc.offset)
                os.pwrite(fd, frame, pos)
                moved[sig] = _Loc(seg, pos, loc.length)
                pos += loc.length
            os.fsync(fd)
            self._fds[seg] = fd
            self._sizes[seg] = pos
            self._segments = [seg]
            self._write_manifest()
            self._index.update(moved)
            self._live_bytes = pos
            for s in old:
                # in-flight readers keep working through the still-open fd until close()
                self._segment_path(s).unlink(missing_ok=True)
                del self._sizes[s]
            log.info("compacted %d segments into %06d (%d bytes)", len(old), seg, pos)

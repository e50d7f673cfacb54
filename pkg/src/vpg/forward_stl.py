"""Scene -> shoppable products, with a TTL cache keyed by scene and user context."""

from __future__ import annotations

import json
import os
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Hashable, Iterable, Sequence

from .ann import AnnIndex, HnswParams, build_ann
from .core import Category, DetectedObject, Embedding, ImageSignature, category, decode_b64, encode_b64, quantize
from .errors import UnknownEntityError
from .feature_store import FeatureStore, SceneEntry

GENDERS = ("f", "m", "n", "unspecified")
DEFAULT_TTL_SECONDS = 7200.0


@dataclass(frozen=True, eq=False)
class ProductEntry:
    signature: ImageSignature
    embedding: Embedding
    category: Category
    in_stock: bool = True
    legitimate_domain: bool = True
    safe: bool = True

    @property
    def trusted(self) -> bool:
        return self.in_stock and self.legitimate_domain and self.safe

    def __eq__(self, other):
        if not isinstance(other, ProductEntry):
            return NotImplemented
        return self.signature == other.signature

    def __hash__(self):
        return hash(self.signature)

    def to_json(self) -> dict:
        return {
            "signature": self.signature.hex(),
            "embedding": encode_b64(self.embedding),
            "category": self.category.name,
            "in_stock": self.in_stock,
            "legitimate_domain": self.legitimate_domain,
            "safe": self.safe,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ProductEntry":
        return cls(
            ImageSignature.from_hex(d["signature"]),
            decode_b64(d["embedding"]),
            category(d["category"]),
            bool(d.get("in_stock", True)),
            bool(d.get("legitimate_domain", True)),
            bool(d.get("safe", True)),
        )


def read_products_jsonl(path: str | os.PathLike) -> list[ProductEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ProductEntry.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed product record ({exc})") from exc
    return out


class ProductCatalog:
    """All known products plus an ANN index over the trusted ones."""

    ANN_FILE = "products.vpga"
    CATALOG_FILE = "products.jsonl"

    def __init__(self, products: Iterable[ProductEntry], params: HnswParams | None = None, ann: AnnIndex | None = None):
        self.products: dict[ImageSignature, ProductEntry] = {}
        for p in products:
            # stored at on-disk precision so a reloaded catalog is identical to this one
            self.products[p.signature] = replace(p, embedding=quantize(p.embedding))  # later rows win
        self.params = params or HnswParams()
        self.ann = ann if ann is not None else self._build()

    def _build(self) -> AnnIndex:
        trusted = [p for sig, p in sorted(self.products.items()) if p.trusted]
        return build_ann(((p.signature, p.embedding) for p in trusted), self.params)

    def __len__(self) -> int:
        return len(self.products)

    def __getitem__(self, sig: ImageSignature) -> ProductEntry:
        return self.products[sig]

    def append(self, products: Iterable[ProductEntry]) -> "ProductCatalog":
        return ProductCatalog(list(self.products.values()) + list(products), self.params)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.ann.save(d / self.ANN_FILE)
        with open(d / self.CATALOG_FILE, "w", encoding="utf-8") as fh:
            for sig in sorted(self.products):
                fh.write(json.dumps(self.products[sig].to_json()) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ProductCatalog":
        d = Path(directory)
        ann = AnnIndex.load(d / cls.ANN_FILE)
        return cls(read_products_jsonl(d / cls.CATALOG_FILE), ann.params, ann)


@dataclass(frozen=True)
class UserContext:
    gender: str = "unspecified"
    country: str = "unspecified"

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be one of {GENDERS}")
        if self.country != "unspecified" and not (len(self.country) == 2 and self.country.isalpha() and self.country.isupper()):
            raise ValueError(f"country must be an ISO-3166 alpha-2 code, got {self.country!r}")

    @classmethod
    def parse(cls, text: str | None) -> "UserContext":
        """Parse ``gender=f,country=US``."""
        fields = {}
        for part in (text or "").split(","):
            if not part.strip():
                continue
            key, _, value = part.partition("=")
            key = key.strip()
            if key not in ("gender", "country"):
                raise ValueError(f"unknown context key {key!r}")
            fields[key] = value.strip()
        return cls(**fields)


@dataclass(frozen=True)
class CacheKey:
    scene: ImageSignature
    ctx: UserContext


@dataclass(frozen=True)
class CacheEntry:
    products: tuple
    stored_at: float
    ttl: float

    def fresh(self, now: float) -> bool:
        return now - self.stored_at <= self.ttl


class TTLCache:
    """LRU-bounded TTL cache whose misses are coalesced per key."""

    def __init__(self, ttl: float = DEFAULT_TTL_SECONDS, capacity: int = 10_000, clock: Callable[[], float] = time.monotonic):
        self.ttl = ttl
        self.capacity = capacity
        self.clock = clock
        self._data: OrderedDict[Hashable, CacheEntry] = OrderedDict()
        self._inflight: dict[Hashable, Future] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: Hashable) -> CacheEntry | None:
        with self._lock:
            return self._get_locked(key)

    def lookup(self, key: Hashable) -> CacheEntry | None:
        """Like :meth:`get`, but a fresh entry counts as a cache hit."""
        with self._lock:
            entry = self._get_locked(key)
            if entry is not None:
                self.hits += 1
            return entry

    def _get_locked(self, key):
        entry = self._data.get(key)
        if entry is None:
            return None
        if not entry.fresh(self.clock()):
            del self._data[key]
            return None
        self._data.move_to_end(key)
        return entry

    def put(self, key: Hashable, products: Sequence) -> CacheEntry:
        entry = CacheEntry(tuple(products), self.clock(), self.ttl)
        with self._lock:
            self._data[key] = entry
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)
        return entry

    def get_or_compute(self, key: Hashable, compute: Callable[[], Sequence]) -> tuple[tuple, bool]:
        """Return ``(value, served_from_cache)``; concurrent misses share one computation."""
        with self._lock:
            entry = self._get_locked(key)
            if entry is not None:
                self.hits += 1
                return entry.products, True
            self.misses += 1
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[key] = fut
        if not owner:
            return fut.result(), False
        try:
            value = tuple(compute())
            self.put(key, value)
            fut.set_result(value)
            return value, False
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def stats(self) -> dict:
        with self._lock:
            total = self.hits + self.misses
            return {"entries": len(self._data), "hits": self.hits, "misses": self.misses, "hit_rate": self.hits / total if total else None}


def decompose(entry: SceneEntry, max_objects: int = 4) -> list[DetectedObject]:
    """Highest-confidence objects first; ties keep the stored object order."""
    ranked = sorted(enumerate(entry.objects), key=lambda io: (-io[1].confidence, io[0]))
    return [obj for _, obj in ranked[:max_objects]]


def filter_candidates(
    cands: Sequence[Sequence[tuple[ProductEntry, float]]], objects: Sequence[DetectedObject]
) -> list[list[tuple[ProductEntry, float]]]:
    """Drop unsafe products and products outside the query object's domain."""
    return [
        [(p, d) for p, d in lst if p.safe and p.category.domain == obj.category.domain]
        for lst, obj in zip(cands, objects)
    ]


def round_robin_merge(cands: Sequence[Sequence], n_out: int = 3) -> list:
    """Each round gives every object one pick, in object order.

    An object whose next candidate was already emitted advances to its next
    unseen candidate within the same turn; exhausted objects are skipped.
    """
    out: list = []
    seen: set = set()
    cursors = [0] * len(cands)
    while len(out) < n_out:
        progressed = False
        for i, lst in enumerate(cands):
            if len(out) >= n_out:
                break
            while cursors[i] < len(lst):
                item = lst[cursors[i]]
                cursors[i] += 1
                product = item[0] if isinstance(item, tuple) else item
                key = getattr(product, "signature", product)
                if key not in seen:
                    seen.add(key)
                    out.append(product)
                    progressed = True
                    break
        if not progressed:
            break
    return out


class ForwardSTL:
    def __init__(
        self,
        store: FeatureStore,
        catalog: ProductCatalog,
        cache: TTLCache | None = None,
        extractor: Callable[[ImageSignature], SceneEntry] | None = None,
        *,
        max_objects: int = 4,
        per_object_k: int = 12,
        n_out: int = 3,
        parallelism: int = 4,
        ef_search: int | None = None,
    ):
        self.store = store
        self.catalog = catalog
        self.cache = cache if cache is not None else TTLCache()
        self.extractor = extractor
        self.max_objects = max_objects
        self.per_object_k = per_object_k
        self.n_out = n_out
        self.parallelism = parallelism
        self.ef_search = ef_search
        self._runs_lock = threading.Lock()
        self.pipeline_runs = 0

    def scene_entry(self, scene: ImageSignature) -> SceneEntry:
        if self.extractor is not None:
            try:
                return self.store.get_or_extract(scene, self.extractor)[0]
            except Exception as exc:
                raise UnknownEntityError(f"cannot obtain features for scene {scene}: {exc}") from exc
        entry = self.store.get(scene)
        self.store.metrics.record(entry is not None)
        if entry is None:
            raise UnknownEntityError(f"scene {scene} not in feature store")
        return entry

    def decompose_scene(self, scene: ImageSignature) -> list[DetectedObject]:
        return decompose(self.scene_entry(scene), self.max_objects)

    def retrieve_products(self, objects: Sequence[DetectedObject]) -> list[list[tuple[ProductEntry, float]]]:
        """One batched index pass for all objects."""
        if not objects:
            return []
        hits = self.catalog.ann.search_batch([o.embedding for o in objects], self.per_object_k, self.ef_search)
        return [[(self.catalog[sig], d) for sig, d in row] for row in hits]

    def compute(self, scene: ImageSignature) -> list[ProductEntry]:
        with self._runs_lock:
            self.pipeline_runs += 1
        objects = self.decompose_scene(scene)
        cands = filter_candidates(self.retrieve_products(objects), objects)
        return round_robin_merge(cands, self.n_out)

    def forward_lookup(self, scene: ImageSignature, ctx: UserContext | None = None) -> tuple[list[ProductEntry], bool]:
        key = CacheKey(scene, ctx or UserContext())
        products, cached = self.cache.get_or_compute(key, lambda: self.compute(scene))
        return list(products), cached

    def forward_batch(
        self, scenes: Sequence[ImageSignature], ctx: UserContext | None = None, limit: int = 5
    ) -> tuple[dict[ImageSignature, list[ProductEntry]], dict[ImageSignature, str]]:
        """Resolve up to ``limit`` scenes; cached ones inline, the rest on a bounded pool."""
        ctx = ctx or UserContext()
        scenes = list(dict.fromkeys(scenes))[:limit]
        results: dict[ImageSignature, list[ProductEntry]] = {}
        errors: dict[ImageSignature, str] = {}
        pending = []
        for sig in scenes:
            entry = self.cache.lookup(CacheKey(sig, ctx))
            if entry is not None:
                results[sig] = list(entry.products)
            else:
                pending.append(sig)
        if pending:
            with ThreadPoolExecutor(max_workers=max(1, min(self.parallelism, len(pending)))) as pool:
                futures = {sig: pool.submit(self.forward_lookup, sig, ctx) for sig in pending}
            for sig, fut in futures.items():
                try:
                    results[sig] = fut.result()[0]
                except Exception as exc:  # reported per scene
                    errors[sig] = str(exc)
        ordered = {sig: results[sig] for sig in scenes if sig in results}
        return ordered, errors

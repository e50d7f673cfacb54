"""Shared core behind the CLI and the HTTP service.

Every answer both front ends give comes from the methods here, so the two
can never disagree about a query.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from pathlib import Path
from typing import Callable, Iterable

from .ann import HnswParams
from .config import EngineConfig
from .core import ImageSignature
from .errors import VPGError
from .feature_store import FeatureStore, SceneEntry, read_scenes_jsonl
from .forward_stl import ForwardSTL, ProductCatalog, ProductEntry, TTLCache, UserContext, read_products_jsonl
from .object_index import ObjectIndex, build_from_store, is_corpus_entry
from .reverse_stl import RelevanceCalibration, ReverseSTL

log = logging.getLogger(__name__)

CALIBRATION_FILE = "calibration.json"
BUILD_REPORT_FILE = "build_report.json"
PRODUCTS_DIR = "products"


def parse_signature(text: str) -> ImageSignature:
    try:
        return ImageSignature.from_hex(text)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"malformed image signature {text!r}") from exc


class Engine:
    def __init__(self, config: EngineConfig, clock: Callable[[], float] = time.monotonic):
        self.config = config
        self.clock = clock
        self._store: FeatureStore | None = None
        self._world = None
        self.index: ObjectIndex | None = None
        self.catalog: ProductCatalog | None = None
        self.calibration: RelevanceCalibration | None = None
        self.reverse_stl: ReverseSTL | None = None
        self.forward_stl: ForwardSTL | None = None
        self.cache = TTLCache(config.forward.ttl_seconds, config.forward.cache_capacity, clock)
        self._lock = threading.Lock()

    # -- resources -------------------------------------------------------

    @property
    def index_dir(self) -> Path:
        return Path(self.config.index_dir)

    @property
    def store(self) -> FeatureStore:
        with self._lock:
            if self._store is None:
                self._store = FeatureStore(self.config.store_dir)
            return self._store

    def hnsw_params(self) -> HnswParams:
        h = self.config.hnsw
        return HnswParams(h.M, h.ef_construction, h.ef_search, h.seed)

    def extractor(self):
        if not self.config.online_fallback:
            return None
        if self._world is None:
            from .vision import SyntheticWorld

            self._world = SyntheticWorld(self.config.world_config())
        return self._world.extractor()

    def close(self) -> None:
        if self._store is not None:
            self._store.close()
            self._store = None

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- ingestion and builds ------------------------------------------------

    def backfill(self, scenes_path: str | None = None, products_path: str | None = None) -> dict:
        written = 0
        if scenes_path:
            written += self.store.backfill(read_scenes_jsonl(scenes_path))
        if products_path:
            written += self.store.backfill(_product_rows(read_products_jsonl(products_path)))
        return {"written": written, **self.store.stats()}

    def products_append(self, path: str) -> dict:
        """Fold a daily increment into the catalog and rebuild its index."""
        new = read_products_jsonl(path)
        cat_dir = self.index_dir / PRODUCTS_DIR
        if (cat_dir / ProductCatalog.ANN_FILE).exists():
            catalog = ProductCatalog.load(cat_dir).append(new)
        else:
            catalog = ProductCatalog(new, self.hnsw_params())
        catalog.save(cat_dir)
        self.store.backfill(_product_rows(new))
        self.catalog = catalog
        return {"appended": len(new), "catalog_size": len(catalog), "indexed": len(catalog.ann)}

    def build_index(self, products_path: str | None = None) -> dict:
        index, report = build_from_store(self.store, self.config.filter_config(), self.hnsw_params())
        index.save(self.index_dir)
        out = {"scenes": report.to_dict(), "objects_indexed": len(index)}
        if products_path:
            catalog = ProductCatalog(read_products_jsonl(products_path), self.hnsw_params())
            catalog.save(self.index_dir / PRODUCTS_DIR)
            out["products_indexed"] = len(catalog.ann)
        (self.index_dir / BUILD_REPORT_FILE).write_text(json.dumps(out, indent=2, sort_keys=True))
        stale = self.index_dir / CALIBRATION_FILE
        if stale.exists():
            stale.unlink()  # thresholds belong to one index build
        self.index = index
        return out

    def calibration_queries(self, n: int | None = None) -> list[ImageSignature]:
        n = n or self.config.relevance.calibration_size
        if self.catalog is not None:
            pool = sorted(self.catalog.products)
        else:
            pool = [e.signature for e in self.store.scan(lambda e: not is_corpus_entry(e))]
        if len(pool) <= n:
            return pool
        return sorted(random.Random(self.config.relevance.seed).sample(pool, n))

    def calibrate(self, n: int | None = None) -> dict:
        self.load(require_calibration=False)
        queries = self.calibration_queries(n)
        cal = self.reverse_stl.calibrate(queries, self.config.relevance.percentile)
        cal.save(self.index_dir / CALIBRATION_FILE)
        self.calibration = cal
        return cal.to_json()

    # -- serving ---------------------------------------------------------

    def load(self, require_calibration: bool = False) -> "Engine":
        if self.index is None:
            if not (self.index_dir / ObjectIndex.ANN_FILE).exists():
                raise VPGError(f"no object index in {self.index_dir}; run `vpg index build` first")
            self.index = ObjectIndex.load(self.index_dir)
        cat_dir = self.index_dir / PRODUCTS_DIR
        if self.catalog is None and (cat_dir / ProductCatalog.ANN_FILE).exists():
            self.catalog = ProductCatalog.load(cat_dir)
        cal_path = self.index_dir / CALIBRATION_FILE
        if self.calibration is None and cal_path.exists():
            self.calibration = RelevanceCalibration.load(cal_path)
        if require_calibration and self.calibration is None:
            raise VPGError(f"no calibration in {self.index_dir}; run `vpg calibrate` first")
        r, d = self.config.rerank, self.config.dedup
        self.reverse_stl = ReverseSTL(
            self.store, self.index, self.calibration, self.extractor(),
            k_raw=r.k_raw, hamming_max=d.hamming_max, lam=r.lam, n_out=r.n_out,
        )
        if self.catalog is not None:
            f = self.config.forward
            self.forward_stl = ForwardSTL(
                self.store, self.catalog, self.cache, self.extractor(),
                max_objects=f.max_objects, per_object_k=f.per_object_k, n_out=f.n_out, parallelism=f.parallelism,
            )
        return self

    def reverse(self, product: str | ImageSignature) -> dict:
        sig = parse_signature(product) if isinstance(product, str) else product
        if self.reverse_stl is None:
            self.load()
        return self.reverse_stl.query(sig).to_json()

    def _forward_stl(self) -> ForwardSTL:
        if self.forward_stl is None:
            self.load()
        if self.forward_stl is None:
            raise VPGError("no product catalog; run `vpg index build --products` or `vpg products append`")
        return self.forward_stl

    def forward(self, scene: str | ImageSignature, ctx: UserContext | None = None) -> dict:
        sig = parse_signature(scene) if isinstance(scene, str) else scene
        ctx = ctx or UserContext()
        products, cached = self._forward_stl().forward_lookup(sig, ctx)
        return forward_json(sig, ctx, products, cached)

    def forward_batch(self, scenes: Iterable[str | ImageSignature], ctx: UserContext | None = None) -> dict:
        sigs = [parse_signature(s) if isinstance(s, str) else s for s in scenes]
        ctx = ctx or UserContext()
        results, errors = self._forward_stl().forward_batch(sigs, ctx, self.config.forward.batch_limit)
        return {
            "context": {"gender": ctx.gender, "country": ctx.country},
            "results": {s.hex(): [product_json(p, i) for i, p in enumerate(ps)] for s, ps in results.items()},
            "errors": {s.hex(): msg for s, msg in errors.items()},
        }

    def metrics(self) -> dict:
        out = {"store": self.store.metrics.snapshot(), "cache": self.cache.stats()}
        if self.index is not None:
            out["object_index"] = {"entries": len(self.index), "queries": self.index.ann.queries.value}
        if self.catalog is not None:
            out["product_index"] = {"entries": len(self.catalog.ann), "queries": self.catalog.ann.queries.value}
        if self.forward_stl is not None:
            out["forward_pipeline_runs"] = self.forward_stl.pipeline_runs
        return out


def product_json(p: ProductEntry, rank: int) -> dict:
    return {"signature": p.signature.hex(), "category": p.category.name, "rank": rank}


def forward_json(scene: ImageSignature, ctx: UserContext, products, cached: bool) -> dict:
    return {
        "scene": scene.hex(),
        "context": {"gender": ctx.gender, "country": ctx.country},
        "products": [product_json(p, i) for i, p in enumerate(products)],
        "served_from_cache": cached,
    }


def _product_rows(products: Iterable[ProductEntry]) -> Iterable[SceneEntry]:
    """Product images live in the feature store as object-less entries without scene metadata."""
    for p in products:
        yield SceneEntry(p.signature, p.embedding, (), 0, "backfill")


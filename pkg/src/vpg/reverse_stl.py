"""Product -> inspirational scenes.

Stages: object ANN retrieval aggregated per scene, a global relevance
threshold, exact/near-duplicate removal, then a diversity re-rank that never
moves the top result.  Scores are negative euclidean distances.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    NEAR_DUP_HAMMING_MAX,
    Embedding,
    ImageSignature,
    NearDupSignature,
    euclidean_distance,
    near_dup_signature,
)
from .errors import InsufficientCalibrationData, UnknownEntityError
from .feature_store import FeatureStore, SceneEntry
from .object_index import ObjectIndex, ObjectIndexEntry

MIN_CALIBRATION_QUERIES = 100
TOP_FOR_CALIBRATION = 5


@dataclass(frozen=True, eq=False)
class SceneCandidate:
    scene: ImageSignature
    best_object: ObjectIndexEntry | None
    score: float
    near_dup: NearDupSignature
    scene_embedding: Embedding | None = None

    @property
    def embedding(self) -> Embedding:
        if self.scene_embedding is not None:
            return self.scene_embedding
        return self.best_object.embedding

    def to_json(self) -> dict:
        out = {"scene": self.scene.hex(), "score": self.score, "near_dup": self.near_dup.hex()}
        if self.best_object is not None:
            out["object"] = {
                "ordinal": self.best_object.object_key[1],
                "box": self.best_object.box.as_list(),
                "category": self.best_object.category.name,
            }
        return out


@dataclass(frozen=True)
class RelevanceCalibration:
    threshold: float
    calibration_size: int
    percentile: float = 0.75

    def __post_init__(self):
        if not np.isfinite(self.threshold):
            raise ValueError("calibrated threshold must be finite")
        if not 0.0 <= self.percentile <= 1.0:
            raise ValueError("percentile must lie in [0, 1]")

    def to_json(self) -> dict:
        return {"threshold": self.threshold, "calibration_size": self.calibration_size, "percentile": self.percentile}

    @classmethod
    def from_json(cls, d: dict) -> "RelevanceCalibration":
        return cls(float(d["threshold"]), int(d["calibration_size"]), float(d.get("percentile", 0.75)))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RelevanceCalibration":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def aggregate_by_scene(
    hits: Iterable[tuple[ObjectIndexEntry, float]],
    scene_embeddings: dict[ImageSignature, Embedding] | None = None,
) -> list[SceneCandidate]:
    """Collapse object hits to one candidate per parent scene (best object wins)."""
    best: dict[ImageSignature, tuple[float, ObjectIndexEntry]] = {}
    for obj, dist in hits:
        cur = best.get(obj.parent)
        if cur is None or dist < cur[0] or (dist == cur[0] and obj.object_key[1] < cur[1].object_key[1]):
            best[obj.parent] = (dist, obj)
    scene_embeddings = scene_embeddings or {}
    out = []
    for sig, (dist, obj) in best.items():
        emb = scene_embeddings.get(sig)
        basis = emb if emb is not None else obj.embedding
        out.append(SceneCandidate(sig, obj, 0.0 - dist, near_dup_signature(basis), emb))
    out.sort(key=lambda c: (-c.score, c.scene))
    return out


def retrieve_candidates(query: Embedding, index: ObjectIndex, k_raw: int = 150, ef_search: int | None = None) -> list[SceneCandidate]:
    if len(index) == 0:
        return []
    return aggregate_by_scene(index.search(query, k_raw, ef_search), index.scenes)


def pooled_percentile(values: Sequence[float], percentile: float) -> float:
    """Linear interpolation between order statistics (``percentile`` in [0, 1])."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), percentile * 100.0))


def calibrate_relevance(
    queries: Sequence[ImageSignature],
    retrieve: Callable[[ImageSignature], list[SceneCandidate]],
    percentile: float = 0.75,
    min_queries: int = MIN_CALIBRATION_QUERIES,
) -> RelevanceCalibration:
    """Pool every query's top-5 scores; the threshold is their ``percentile``."""
    if len(queries) < min_queries:
        raise InsufficientCalibrationData(f"need at least {min_queries} calibration queries, got {len(queries)}")
    pool: list[float] = []
    for q in queries:
        pool.extend(c.score for c in retrieve(q)[:TOP_FOR_CALIBRATION])
    if not pool:
        raise InsufficientCalibrationData("calibration queries returned no candidates")
    return RelevanceCalibration(pooled_percentile(pool, percentile), len(queries), percentile)


def relevance_filter(cands: Sequence[SceneCandidate], cal: RelevanceCalibration) -> list[SceneCandidate]:
    return [c for c in cands if c.score >= cal.threshold]


def dedup(cands: Sequence[SceneCandidate], hamming_max: int = NEAR_DUP_HAMMING_MAX) -> list[SceneCandidate]:
    """Front-to-back: drop exact signature repeats and near-duplicates of anything kept."""
    kept: list[SceneCandidate] = []
    seen: set[ImageSignature] = set()
    for c in cands:
        if c.scene in seen:
            continue
        if any(c.near_dup.distance(k.near_dup) <= hamming_max for k in kept):
            continue
        kept.append(c)
        seen.add(c.scene)
    return kept


def rerank(cands: Sequence[SceneCandidate], n_out: int = 10, lam: float = 0.5) -> list[SceneCandidate]:
    """Pinned top slot, then greedy MMR with similarity = -euclidean distance."""
    if not cands or n_out <= 0:
        return []
    picked = [cands[0]]
    rest = list(cands[1:])
    if lam == 0:
        return (picked + rest)[:n_out]
    # closest[i]: distance from rest[i] to its nearest already-picked candidate
    closest = [euclidean_distance(c.embedding, picked[0].embedding) for c in rest]
    while rest and len(picked) < n_out:
        best_i = max(range(len(rest)), key=lambda i: (rest[i].score + lam * closest[i], -i))
        chosen = rest.pop(best_i)
        closest.pop(best_i)
        picked.append(chosen)
        for i, c in enumerate(rest):
            closest[i] = min(closest[i], euclidean_distance(c.embedding, chosen.embedding))
    return picked


@dataclass
class ReverseResult:
    product: ImageSignature
    scenes: list[SceneCandidate]
    trace: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "product": self.product.hex(),
            "scenes": [dict(c.to_json(), rank=i) for i, c in enumerate(self.scenes)],
            "trace": dict(self.trace),
        }


class ReverseSTL:
    """Serving path over an immutable object index and calibration."""

    def __init__(
        self,
        store: FeatureStore,
        index: ObjectIndex,
        calibration: RelevanceCalibration | None = None,
        extractor: Callable[[ImageSignature], SceneEntry] | None = None,
        *,
        k_raw: int = 150,
        ef_search: int | None = None,
        hamming_max: int = NEAR_DUP_HAMMING_MAX,
        lam: float = 0.5,
        n_out: int = 10,
    ):
        self.store = store
        self.index = index
        self.calibration = calibration
        self.extractor = extractor
        self.k_raw = k_raw
        self.ef_search = ef_search
        self.hamming_max = hamming_max
        self.lam = lam
        self.n_out = n_out

    def product_embedding(self, product: ImageSignature) -> Embedding:
        if self.extractor is None:
            entry = self.store.get(product)
            self.store.metrics.record(entry is not None)
            if entry is None:
                raise UnknownEntityError(f"no features stored for product {product}")
        else:
            try:
                entry, _ = self.store.get_or_extract(product, self.extractor)
            except Exception as exc:
                raise UnknownEntityError(f"cannot obtain embedding for product {product}: {exc}") from exc
        return entry.full_embedding

    def retrieve_scenes(self, product: ImageSignature, k_raw: int | None = None) -> list[SceneCandidate]:
        return retrieve_candidates(self.product_embedding(product), self.index, k_raw or self.k_raw, self.ef_search)

    def calibrate(self, queries: Sequence[ImageSignature], percentile: float = 0.75, min_queries: int = MIN_CALIBRATION_QUERIES) -> RelevanceCalibration:
        self.calibration = calibrate_relevance(queries, self.retrieve_scenes, percentile, min_queries)
        return self.calibration

    def query(self, product: ImageSignature) -> ReverseResult:
        cands = self.retrieve_scenes(product)
        trace = {"retrieved": len(cands)}
        if self.calibration is not None:
            cands = relevance_filter(cands, self.calibration)
        trace["after_relevance"] = len(cands)
        cands = dedup(cands, self.hamming_max)
        trace["after_dedup"] = len(cands)
        cands = rerank(cands, self.n_out, self.lam)
        trace["returned"] = len(cands)
        return ReverseResult(product, cands, trace)

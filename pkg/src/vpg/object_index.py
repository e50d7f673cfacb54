"""Scene corpus filtering and the object-keyed ANN index behind product-to-scene retrieval."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator

from .ann import AnnIndex, HnswParams, build_ann
from .core import TAXONOMY, BoundingBox, Category, Embedding, ImageMetadata, ImageSignature, category, decode_b64, encode_b64
from .errors import ConfigError, DuplicateKeyError
from .feature_store import FeatureStore, SceneEntry

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

INSPIRATIONAL = "inspirational"
IMAGE_QUALITY = "image_quality"
SHOPPABILITY = "shoppability"
FILTER_ORDER = (INSPIRATIONAL, IMAGE_QUALITY, SHOPPABILITY)


@dataclass(frozen=True)
class FilterConfig:
    min_width: int = 512
    min_height: int = 512
    max_blur: float = 0.5
    min_confidence: float = 0.6
    min_area_fraction: float = 0.005
    allowed_categories: frozenset[str] = field(default_factory=lambda: frozenset(TAXONOMY))
    min_categories: int = 3

    def __post_init__(self):
        errs = []
        if self.min_width < 1 or self.min_height < 1:
            errs.append("min_width/min_height must be positive")
        if not 0.0 <= self.max_blur <= 1.0:
            errs.append("max_blur must be in [0, 1]")
        if not 0.0 <= self.min_confidence <= 1.0:
            errs.append("min_confidence must be in [0, 1]")
        if not 0.0 <= self.min_area_fraction < 1.0:
            errs.append("min_area_fraction must be in [0, 1)")
        if self.min_categories < 1:
            errs.append("min_categories must be >= 1")
        unknown = sorted(set(self.allowed_categories) - set(TAXONOMY))
        if unknown:
            errs.append(f"allowed_categories not in taxonomy: {unknown}")
        if errs:
            raise ConfigError(errs)

    @classmethod
    def from_mapping(cls, data: dict) -> "FilterConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown filter key {k!r}" for k in unknown])
        data = dict(data)
        if "allowed_categories" in data:
            data["allowed_categories"] = frozenset(data["allowed_categories"])
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FilterConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_mapping(data.get("filters", data))


@dataclass(frozen=True)
class CorpusRecord:
    scene: SceneEntry
    metadata: ImageMetadata

    @classmethod
    def from_entry(cls, entry: SceneEntry) -> "CorpusRecord":
        if entry.metadata is None:
            raise ValueError(f"scene {entry.signature} carries no image metadata")
        return cls(entry, entry.metadata)


@dataclass
class FilterReport:
    input_count: int = 0
    kept_count: int = 0
    rejects: dict[str, int] = field(default_factory=lambda: {name: 0 for name in FILTER_ORDER})
    objects_in: int = 0
    objects_kept: int = 0

    def to_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "kept_count": self.kept_count,
            "rejects": dict(self.rejects),
            "objects_in": self.objects_in,
            "objects_kept": self.objects_kept,
        }


def object_passes(obj, meta: ImageMetadata, config: FilterConfig) -> bool:
    area = meta.width * meta.height
    return (
        obj.confidence >= config.min_confidence
        and obj.box.area >= config.min_area_fraction * area
        and obj.category.name in config.allowed_categories
    )


def judge(record: CorpusRecord, config: FilterConfig) -> tuple[str | None, SceneEntry]:
    """Return (first failing filter or None, scene with failing objects pruned)."""
    meta = record.metadata
    if not meta.is_inspirational:
        return INSPIRATIONAL, record.scene
    if (
        meta.is_grayscale
        or meta.is_collage_or_screenshot
        or meta.width < config.min_width
        or meta.height < config.min_height
        or meta.blur_score > config.max_blur
    ):
        return IMAGE_QUALITY, record.scene
    survivors = tuple(o for o in record.scene.objects if object_passes(o, meta, config))
    if len({o.category.name for o in survivors}) < config.min_categories:
        return SHOPPABILITY, record.scene
    return None, replace(record.scene, objects=survivors)


def filter_corpus(records: Iterable[CorpusRecord], config: FilterConfig | None = None) -> tuple[list[SceneEntry], FilterReport]:
    config = config or FilterConfig()
    report = FilterReport()
    kept = []
    for record in records:
        report.input_count += 1
        report.objects_in += len(record.scene.objects)
        reason, scene = judge(record, config)
        if reason is None:
            kept.append(scene)
            report.kept_count += 1
            report.objects_kept += len(scene.objects)
        else:
            report.rejects[reason] += 1
    return kept, report


@dataclass(frozen=True, eq=False)
class ObjectIndexEntry:
    object_key: tuple[ImageSignature, int]
    parent: ImageSignature
    box: BoundingBox
    category: Category
    confidence: float
    embedding: Embedding

    def to_json(self) -> dict:
        return {
            "parent": self.parent.hex(),
            "ordinal": self.object_key[1],
            "box": self.box.as_list(),
            "category": self.category.name,
            "confidence": self.confidence,
        }


def pivot_to_objects(scenes: Iterable[SceneEntry]) -> Iterator[ObjectIndexEntry]:
    """One entry per object, ordinals in the scene's object order."""
    seen: set[ImageSignature] = set()
    for scene in scenes:
        if scene.signature in seen:
            raise DuplicateKeyError(f"scene {scene.signature} appears twice")
        seen.add(scene.signature)
        for ordinal, obj in enumerate(scene.objects):
            yield ObjectIndexEntry((scene.signature, ordinal), scene.signature, obj.box, obj.category, obj.confidence, obj.embedding)


class ObjectIndex:
    """ANN graph over object embeddings plus the object metadata it points at."""

    ANN_FILE = "objects.vpga"
    META_FILE = "objects.jsonl"
    SCENES_FILE = "scenes.jsonl"

    def __init__(
        self,
        ann: AnnIndex,
        entries: dict[tuple[ImageSignature, int], ObjectIndexEntry],
        scenes: dict[ImageSignature, Embedding] | None = None,
    ):
        self.ann = ann
        self.entries = entries
        self.scenes = scenes or {}

    def __len__(self) -> int:
        return len(self.ann)

    @classmethod
    def build(cls, scenes: Iterable[SceneEntry], params: HnswParams | None = None) -> "ObjectIndex":
        scenes = list(scenes)
        objects = list(pivot_to_objects(scenes))
        ann = build_ann(((o.object_key, o.embedding) for o in objects), params or HnswParams())
        return cls(ann, {o.object_key: o for o in objects}, {s.signature: s.full_embedding for s in scenes})

    def search(self, q, k: int, ef_search: int | None = None) -> list[tuple[ObjectIndexEntry, float]]:
        return [(self.entries[key], dist) for key, dist in self.ann.search(q, k, ef_search)]

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.ann.save(d / self.ANN_FILE)
        with open(d / self.META_FILE, "w", encoding="utf-8") as fh:
            for key in self.ann.keys:
                fh.write(json.dumps(self.entries[key].to_json()) + "\n")
        with open(d / self.SCENES_FILE, "w", encoding="utf-8") as fh:
            for sig in sorted(self.scenes):
                fh.write(json.dumps({"signature": sig.hex(), "full_embedding": encode_b64(self.scenes[sig])}) + "\n")

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "ObjectIndex":
        d = Path(directory)
        ann = AnnIndex.load(d / cls.ANN_FILE)
        entries = {}
        with open(d / cls.META_FILE, encoding="utf-8") as fh:
            for row, line in enumerate(fh):
                m = json.loads(line)
                key = (ImageSignature.from_hex(m["parent"]), int(m["ordinal"]))
                entries[key] = ObjectIndexEntry(
                    key, key[0], BoundingBox.from_list(m["box"]), category(m["category"]), float(m["confidence"]), ann.vectors[row]
                )
        scenes = {}
        with open(d / cls.SCENES_FILE, encoding="utf-8") as fh:
            for line in fh:
                m = json.loads(line)
                scenes[ImageSignature.from_hex(m["signature"])] = decode_b64(m["full_embedding"])
        return cls(ann, entries, scenes)


def is_corpus_entry(entry: SceneEntry) -> bool:
    """Scene images carry image metadata; catalog product images do not."""
    return entry.metadata is not None


def build_from_store(
    store: FeatureStore, config: FilterConfig | None = None, params: HnswParams | None = None
) -> tuple[ObjectIndex, FilterReport]:
    records = (CorpusRecord.from_entry(e) for e in store.scan(is_corpus_entry))
    kept, report = filter_corpus(records, config)
    return ObjectIndex.build(kept, params), report

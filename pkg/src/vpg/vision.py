"""Synthetic detector/embedder plus the model-adjacent utilities.

The synthetic world gives every product a unit latent vector and composes
scenes out of products laid out on a 3x2 grid.  ``noise_sigma`` is the
expected euclidean norm of the per-image noise added before renormalising,
so it is directly comparable with inter-product distances (~1.41 for random
unit vectors).
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .core import (
    DOMAINS,
    BoundingBox,
    Category,
    DetectedObject,
    Embedding,
    ImageMetadata,
    ImageSignature,
    as_embedding,
    categories_in,
)
from .errors import ConfigError, UnknownEntityError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 7
    dimension: int = 256
    products: int = 1000
    scenes: int = 10000
    noise_sigma: float = 0.0
    min_separation: float = 0.5
    min_objects: int = 3
    max_objects: int = 6
    duplicate_rate: float = 0.0
    false_positive_rate: float = 0.0
    repost_rate: float = 0.02
    non_inspirational_rate: float = 0.02
    grayscale_rate: float = 0.02
    collage_rate: float = 0.02
    low_res_rate: float = 0.02
    blurry_rate: float = 0.02
    untrusted_rate: float = 0.0
    nms_iou: float = 0.5

    def validate(self) -> None:
        errs = []
        if self.dimension < 2:
            errs.append("dimension must be >= 2")
        if self.products < 1:
            errs.append("products must be >= 1")
        if self.scenes < 0:
            errs.append("scenes must be >= 0")
        if self.noise_sigma < 0:
            errs.append("noise_sigma must be >= 0")
        if not 1 <= self.min_objects <= self.max_objects <= 6:
            errs.append("need 1 <= min_objects <= max_objects <= 6")
        for f in fields(self):
            if f.name.endswith("_rate") and not 0.0 <= getattr(self, f.name) <= 1.0:
                errs.append(f"{f.name} must be in [0, 1]")
        if not 0.0 < self.nms_iou < 1.0:
            errs.append("nms_iou must be in (0, 1)")
        if errs:
            raise ConfigError(errs)

    @classmethod
    def from_mapping(cls, data: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown world key {k!r}" for k in unknown])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "WorldConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return cls.from_mapping(data.get("world", data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProductTruth:
    pid: int
    signature: ImageSignature
    category: Category
    in_stock: bool = True
    legitimate_domain: bool = True
    safe: bool = True


@dataclass(frozen=True)
class SceneTruth:
    index: int
    signature: ImageSignature
    domain: str
    objects: tuple[tuple[int, BoundingBox, Category], ...]
    metadata: ImageMetadata
    repost_of: int | None = None

    @property
    def product_ids(self) -> list[int]:
        return [pid for pid, _, _ in self.objects]


@dataclass(frozen=True, eq=False)
class RawDetection:
    box: BoundingBox
    scores: dict
    confidence: float
    embedding: Embedding = field(default_factory=lambda: as_embedding([]))

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0 or any(not 0.0 <= s <= 1.0 for s in self.scores.values()):
            raise ValueError("scores must lie in [0, 1]")

    @property
    def category(self) -> Category:
        return max(self.scores.items(), key=lambda kv: (kv[1], _neg_name(kv[0])))[0]

    def to_object(self) -> DetectedObject:
        return DetectedObject(self.box, self.category, self.confidence, self.embedding)


def _neg_name(cat: Category) -> tuple:
    # argmax tie -> alphabetically first category
    return tuple(-ord(ch) for ch in cat.name)


@dataclass(frozen=True)
class Corruption:
    duplicate_rate: float = 0.0
    false_positive_rate: float = 0.0


def _seq(*parts: int) -> np.random.Generator:
    return np.random.default_rng([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])


def _sig_int(sig: ImageSignature) -> int:
    return int.from_bytes(sig.digest[:8], "little")


def _sample(pool: list, n: int, u: float) -> list:
    """n distinct items of ``pool``; ``u`` in [0, 1) seeds a small LCG shuffle."""
    items = list(pool)
    state = int(u * 2**31) | 1
    for i in range(len(items) - 1, 0, -1):
        state = (state * 1103515245 + 12345) & 0x7FFFFFFF
        j = state % (i + 1)
        items[i], items[j] = items[j], items[i]
    return items[:n]


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class SyntheticWorld:
    """Deterministic ground truth: product latents and scene compositions."""

    GRID = (3, 2)

    def __init__(self, config: WorldConfig | None = None, **overrides):
        config = config or WorldConfig(**overrides)
        config.validate()
        self.config = config
        self.seed = config.seed
        self.dim = config.dimension
        self.noise_sigma = config.noise_sigma
        self._latents = self._draw_latents()
        self._clean_cache: dict[int, Embedding] = {}
        self.products: dict[int, np.ndarray] = {pid: self._latents[pid] for pid in range(config.products)}
        self.product_info = self._draw_products()
        self._by_category: dict[str, list[int]] = {}
        for p in self.product_info:
            self._by_category.setdefault(p.category.name, []).append(p.pid)
        self._pools = {d: [c for c in categories_in(d) if c.name in self._by_category] for d in DOMAINS}
        self.scenes: list[SceneTruth] = []
        for i in range(config.scenes):
            self.scenes.append(self._draw_scene(i))
        self._product_by_sig = {p.signature: p for p in self.product_info}
        self._scene_by_sig = {s.signature: s for s in self.scenes}

    # -- generation ----------------------------------------------------

    def _draw_latents(self) -> np.ndarray:
        cfg = self.config
        out = np.zeros((cfg.products, cfg.dimension))
        for pid in range(cfg.products):
            attempt = 0
            while True:
                v = _normalize(_seq(cfg.seed, 1, pid, attempt).standard_normal(cfg.dimension))
                # unit vectors: |a - b|^2 = 2 - 2 a.b
                if pid == 0 or 2.0 - 2.0 * float(np.max(out[:pid] @ v)) >= cfg.min_separation**2:
                    break
                attempt += 1
                if attempt > 1000:
                    raise ConfigError([f"cannot place product {pid} at separation {cfg.min_separation}"])
            out[pid] = v
        return out

    def _draw_products(self) -> list[ProductTruth]:
        cats = [c for d in DOMAINS for c in categories_in(d)]
        out = []
        for pid in range(self.config.products):
            rng = _seq(self.seed, 5, pid)
            flags = rng.random(3) >= self.config.untrusted_rate
            out.append(
                ProductTruth(
                    pid,
                    ImageSignature.of(f"product:{self.seed}:{pid}"),
                    cats[pid % len(cats)],
                    bool(flags[0]),
                    bool(flags[1]),
                    bool(flags[2]),
                )
            )
        return out

    def _draw_scene(self, index: int) -> SceneTruth:
        cfg = self.config
        rng = _seq(cfg.seed, 2, index)
        sig = ImageSignature.of(f"scene:{cfg.seed}:{index}")
        if index > 0 and rng.random() < cfg.repost_rate:
            prev = self.scenes[index - 1]
            return SceneTruth(index, sig, prev.domain, prev.objects, prev.metadata, prev.repost_of if prev.repost_of is not None else prev.index)
        u = rng.random(48).tolist()  # fixed draw budget per scene keeps indices stable
        domain = DOMAINS[int(u[0] * len(DOMAINS))]
        pool = self._pools[domain]
        n_obj = min(cfg.min_objects + int(u[1] * (cfg.max_objects - cfg.min_objects + 1)), len(pool))
        chosen = _sample(pool, n_obj, u[2])
        cells = _sample(list(range(6)), n_obj, u[3])
        low_res = u[4] < cfg.low_res_rate
        lo, hi = (160, 321) if low_res else (800, 1601)
        width, height = lo + int(u[5] * (hi - lo)), lo + int(u[6] * (hi - lo))
        cols, _ = self.GRID
        cw, ch = width / cols, height / 2
        objects = []
        for j, (cat, cell) in enumerate(zip(chosen, cells)):
            members = self._by_category[cat.name]
            pid = members[int(u[7 + j] * len(members)) % len(members)]
            r = u[24 + 4 * j : 28 + 4 * j]
            w = round(cw * (0.5 + 0.4 * r[0]), 1)
            h = round(ch * (0.5 + 0.4 * r[1]), 1)
            x = round((cell % cols) * cw + r[2] * (cw - w), 1)
            y = round((cell // cols) * ch + r[3] * (ch - h), 1)
            objects.append((pid, BoundingBox(x, y, w, h), cat))
        meta = ImageMetadata(
            is_inspirational=u[13] >= cfg.non_inspirational_rate,
            is_grayscale=u[14] < cfg.grayscale_rate,
            is_collage_or_screenshot=u[15] < cfg.collage_rate,
            width=width,
            height=height,
            blur_score=round(0.7 + 0.3 * u[17] if u[16] < cfg.blurry_rate else 0.3 * u[17], 4),
        )
        return SceneTruth(index, sig, domain, tuple(objects), meta)

    # -- lookups -------------------------------------------------------

    def product(self, key: ImageSignature | int) -> ProductTruth:
        if isinstance(key, int):
            if 0 <= key < len(self.product_info):
                return self.product_info[key]
            raise UnknownEntityError(f"unknown product id {key}")
        try:
            return self._product_by_sig[key]
        except KeyError:
            raise UnknownEntityError(f"{key} is not a product image") from None

    def scene(self, sig: ImageSignature) -> SceneTruth:
        try:
            return self._scene_by_sig[sig]
        except KeyError:
            raise UnknownEntityError(f"{sig} is not a scene image") from None

    def is_product(self, sig: ImageSignature) -> bool:
        return sig in self._product_by_sig

    def object_product(self, sig: ImageSignature, box: BoundingBox) -> int:
        """Product id of the ground-truth object best overlapping ``box``."""
        return self.scene(sig).objects[self._ordinal(sig, box)][0]

    def _ordinal(self, sig: ImageSignature, box: BoundingBox) -> int:
        scene = self.scene(sig)
        best, best_iou = -1, 0.0
        for i, (_, gt, _) in enumerate(scene.objects):
            iou = gt.iou(box)
            if iou > best_iou:
                best, best_iou = i, iou
        if best < 0 or best_iou < 0.5:
            raise UnknownEntityError(f"no object of {sig} overlaps box {box.as_list()}")
        return best

    # -- embeddings ----------------------------------------------------

    def _noisy(self, base: np.ndarray, key: bytes) -> Embedding:
        if self.noise_sigma > 0:
            h = hashlib.blake2b(key + struct.pack("<q", self.seed), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(h, "little"))
            base = base + rng.standard_normal(self.dim) * (self.noise_sigma / math.sqrt(self.dim))
        return as_embedding(_normalize(base))

    def _clean(self, pid: int) -> Embedding:
        emb = self._clean_cache.get(pid)
        if emb is None:
            emb = self._clean_cache[pid] = as_embedding(self._latents[pid])
        return emb

    def product_embedding(self, sig: ImageSignature) -> Embedding:
        p = self.product(sig)
        if self.noise_sigma == 0:
            return self._clean(p.pid)
        return self._noisy(self._latents[p.pid], b"P" + sig.digest)

    def object_embedding(self, sig: ImageSignature, ordinal: int) -> Embedding:
        pid = self.scene(sig).objects[ordinal][0]
        if self.noise_sigma == 0:
            return self._clean(pid)
        return self._noisy(self._latents[pid], b"O" + sig.digest + struct.pack("<i", ordinal))

    def scene_embedding(self, sig: ImageSignature) -> Embedding:
        scene = self.scene(sig)
        base = _normalize(self._latents[scene.product_ids].sum(axis=0))
        return self._noisy(base, b"S" + sig.digest)

    def confidence(self, sig: ImageSignature, ordinal: int) -> float:
        h = hashlib.blake2b(sig.digest + struct.pack("<qi", self.seed, ordinal), digest_size=8).digest()
        return round(0.5 + 0.5 * (int.from_bytes(h, "little") >> 11) / 2**53, 6)

    # -- exports -------------------------------------------------------

    def product_entries(self):
        from .forward_stl import ProductEntry

        return [
            ProductEntry(p.signature, self.product_embedding(p.signature), p.category, p.in_stock, p.legitimate_domain, p.safe)
            for p in self.product_info
        ]

    def scene_entries(self, corruption: Corruption | None = None, ingested_at: int = 0):
        from .feature_store import SceneEntry

        if corruption is None:
            corruption = Corruption(self.config.duplicate_rate, self.config.false_positive_rate)
        noisy_detector = corruption.duplicate_rate > 0 or corruption.false_positive_rate > 0
        for scene in self.scenes:
            raw = detect_raw(scene, self, corruption)
            objects = class_agnostic_nms(raw, self.config.nms_iou) if noisy_detector else [r.to_object() for r in raw]
            yield SceneEntry(scene.signature, self.scene_embedding(scene.signature), tuple(objects), ingested_at, "backfill", scene.metadata)

    def truth_records(self) -> Iterable[dict]:
        for p in self.product_info:
            yield {
                "kind": "product",
                "signature": p.signature.hex(),
                "product_id": p.pid,
                "category": p.category.name,
                "latent": self._latents[p.pid].astype(np.float32).tolist(),
            }
        for s in self.scenes:
            yield {
                "kind": "scene",
                "signature": s.signature.hex(),
                "domain": s.domain,
                "objects": [{"product_id": pid, "box": b.as_list(), "category": c.name} for pid, b, c in s.objects],
                "repost_of": s.repost_of,
            }

    def extractor(self) -> Callable[[ImageSignature], "object"]:
        """Online feature extraction for any product or scene signature."""
        from .feature_store import SceneEntry

        def extract(sig: ImageSignature):
            if self.is_product(sig):
                return SceneEntry(sig, self.product_embedding(sig), (), 0, "online_fallback")
            scene = self.scene(sig)
            objects = detect(scene, self)
            return SceneEntry(sig, self.scene_embedding(sig), tuple(objects), 0, "online_fallback", scene.metadata)

        return extract


def embed(key, world: SyntheticWorld) -> Embedding:
    """Embedding of a product image, a scene image, or a box within a scene."""
    if isinstance(key, tuple):
        sig, box = key
        return world.object_embedding(sig, world._ordinal(sig, box))
    if world.is_product(key):
        return world.product_embedding(key)
    return world.scene_embedding(key)


def detect_raw(scene: SceneTruth, world: SyntheticWorld, corruption: Corruption | None = None) -> list[RawDetection]:
    corruption = corruption or Corruption()
    noisy = corruption.duplicate_rate > 0 or corruption.false_positive_rate > 0
    rng = _seq(world.seed, 4, _sig_int(scene.signature)) if noisy else None
    siblings = categories_in(scene.domain)
    out = []
    for ordinal, (pid, box, cat) in enumerate(scene.objects):
        conf = world.confidence(scene.signature, ordinal)
        emb = world.object_embedding(scene.signature, ordinal)
        out.append(RawDetection(box, {cat: conf}, conf, emb))
        if corruption.duplicate_rate > 0 and rng.random() < corruption.duplicate_rate:
            dx, dy = rng.uniform(-0.05, 0.05, size=2)
            dup_box = BoundingBox(max(0.0, box.x + dx * box.w), max(0.0, box.y + dy * box.h), box.w, box.h)
            other = siblings[(siblings.index(cat) + 1) % len(siblings)]
            dup_conf = round(conf * 0.9, 6)
            out.append(RawDetection(dup_box, {other: dup_conf, cat: round(dup_conf * 0.5, 6)}, dup_conf, emb))
    if corruption.false_positive_rate > 0 and rng.random() < corruption.false_positive_rate:
        meta = scene.metadata
        w, h = meta.width * rng.uniform(0.1, 0.2), meta.height * rng.uniform(0.1, 0.2)
        box = BoundingBox(rng.uniform(0, meta.width - w), rng.uniform(0, meta.height - h), w, h)
        cat = siblings[int(rng.integers(len(siblings)))]
        conf = round(float(rng.uniform(0.3, 0.5)), 6)
        out.append(RawDetection(box, {cat: conf}, conf, as_embedding(_normalize(rng.standard_normal(world.dim)))))
    return out


def detect(scene: SceneTruth, world: SyntheticWorld, corruption: Corruption | None = None) -> list[DetectedObject]:
    return [r.to_object() for r in detect_raw(scene, world, corruption)]


def class_agnostic_nms(detections: Sequence[RawDetection | DetectedObject], iou_threshold: float) -> list[DetectedObject]:
    """Greedy suppression by confidence across all classes."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")
    order = sorted(detections, key=lambda d: (-d.confidence, -d.box.area, d.box.as_list()))
    kept: list = []
    for det in order:
        if all(det.box.iou(k.box) < iou_threshold for k in kept):
            kept.append(det)
    return [k.to_object() if isinstance(k, RawDetection) else k for k in kept]


@dataclass(frozen=True)
class ClassHistogram:
    counts: dict

    @property
    def t(self) -> float:
        """75th percentile (linear interpolation) of the per-class counts."""
        values = list(self.counts.values())
        return float(np.percentile(values, 75)) if values else 0.0

    @classmethod
    def of(cls, labels: Iterable[Hashable]) -> "ClassHistogram":
        return cls(dict(Counter(labels)))

    def with_count(self, cat, count: int) -> "ClassHistogram":
        return ClassHistogram({**self.counts, cat: count})


def replication_factor(f_c: float, t: float, literal: bool = False) -> int:
    """``max(1, round(sqrt(t / f_c)))``; ``literal`` uses ``sqrt(f_c / t)`` instead."""
    if f_c <= 0 or t <= 0:
        return 1
    ratio = f_c / t if literal else t / f_c
    return max(1, math.floor(math.sqrt(ratio) + 0.5))


def oversample(dataset: Sequence[tuple[object, Hashable]], hist: ClassHistogram, literal: bool = False) -> list[tuple[object, Hashable]]:
    t = hist.t
    factors = {c: replication_factor(f, t, literal) for c, f in hist.counts.items()}
    out = []
    for item, cat in dataset:
        if cat not in factors:
            raise UnknownEntityError(f"category {cat!r} missing from histogram")
        out.extend([(item, cat)] * factors[cat])
    return out


def mine_similar_examples(
    seeds: Sequence[ImageSignature],
    index,
    k: int,
    lookup: Callable[[ImageSignature], Embedding],
) -> list[ImageSignature]:
    """Union of each seed's k nearest images, best distance first, seeds excluded.

    Index keys may be image signatures or ``(signature, ordinal)`` object keys.
    """
    if k <= 0:
        return []
    best: dict[ImageSignature, float] = {}
    seed_set = set(seeds)
    for seed in seeds:
        emb = lookup(seed)
        if emb is None:
            raise UnknownEntityError(f"seed {seed} not found")
        for key, dist in index.search(emb, k):
            sig = key[0] if isinstance(key, tuple) else key
            if sig in seed_set:
                continue
            if dist < best.get(sig, math.inf):
                best[sig] = dist
    return [sig for sig, _ in sorted(best.items(), key=lambda kv: (kv[1], kv[0]))]

"""Domain types shared across the package.

Embeddings are plain read-only ``float32`` numpy vectors; everything else is
a small frozen dataclass.  Half precision is used only at serialization
boundaries, arithmetic runs in full precision.
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .errors import DimensionError, UnknownEntityError

DEFAULT_DIM = 256
BINARY_WIDTH = 1024
NEAR_DUP_BITS = 64
NEAR_DUP_SEED = 0x5EED
NEAR_DUP_HAMMING_MAX = 8

Embedding = np.ndarray


@dataclass(frozen=True, order=True)
class ImageSignature:
    digest: bytes

    def __post_init__(self):
        if not isinstance(self.digest, bytes) or len(self.digest) != 16:
            raise ValueError("image signature must be 16 bytes")

    @classmethod
    def from_hex(cls, text: str) -> "ImageSignature":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise ValueError(f"bad signature hex: {text!r}") from exc
        return cls(raw)

    @classmethod
    def of(cls, content: str | bytes) -> "ImageSignature":
        """Content digest of arbitrary bytes (used to mint synthetic signatures)."""
        if isinstance(content, str):
            content = content.encode()
        return cls(hashlib.md5(content).digest())

    def hex(self) -> str:
        return self.digest.hex()

    def __str__(self) -> str:
        return self.hex()

    def __repr__(self) -> str:
        return f"ImageSignature({self.hex()})"


@dataclass(frozen=True)
class Category:
    name: str
    domain: str  # "fashion" | "home_decor"


FASHION = "fashion"
HOME_DECOR = "home_decor"
DOMAINS = (FASHION, HOME_DECOR)

_TAXONOMY_NAMES = {
    FASHION: ("top", "bottom", "dress", "outerwear", "shoes", "bag", "hat", "jewelry", "eyewear"),
    HOME_DECOR: ("sofa", "chair", "table", "lamp", "rug", "bed", "plant", "wall_art", "curtain"),
}
TAXONOMY: dict[str, Category] = {
    name: Category(name, domain) for domain, names in _TAXONOMY_NAMES.items() for name in names
}


def category(name: str) -> Category:
    try:
        return TAXONOMY[name]
    except KeyError:
        raise UnknownEntityError(f"category {name!r} is not in the taxonomy") from None


def categories_in(domain: str) -> list[Category]:
    return [c for c in TAXONOMY.values() if c.domain == domain]


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def within(self, width: float, height: float) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    def iou(self, other: "BoundingBox") -> float:
        ix = min(self.x + self.w, other.x + other.w) - max(self.x, other.x)
        iy = min(self.y + self.h, other.y + other.h) - max(self.y, other.y)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_list(cls, xywh: Iterable[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, w, h)


@dataclass(frozen=True, eq=False)
class DetectedObject:
    box: BoundingBox
    category: Category
    confidence: float
    embedding: Embedding

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, DetectedObject):
            return NotImplemented
        return (
            self.box == other.box
            and self.category == other.category
            and self.confidence == other.confidence
            and np.array_equal(self.embedding, other.embedding)
        )

    __hash__ = None


@dataclass(frozen=True)
class BinaryEmbedding:
    bits: int
    width: int = BINARY_WIDTH

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError(f"code does not fit in {self.width} bits")

    def invert(self) -> "BinaryEmbedding":
        return BinaryEmbedding(~self.bits & ((1 << self.width) - 1), self.width)


@dataclass(frozen=True)
class NearDupSignature:
    bits: int

    def hex(self) -> str:
        return f"{self.bits:016x}"

    def distance(self, other: "NearDupSignature") -> int:
        return (self.bits ^ other.bits).bit_count()


def as_embedding(values, dim: int | None = None) -> Embedding:
    """Validate and freeze a vector as a float32 embedding."""
    arr = np.array(values, dtype=np.float32).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise DimensionError(f"expected {dim}-d embedding, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("embedding contains NaN or Inf")
    arr.setflags(write=False)
    return arr


def euclidean_distance(a: Embedding, b: Embedding) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def hamming_distance(a: BinaryEmbedding, b: BinaryEmbedding) -> int:
    if a.width != b.width:
        raise DimensionError(f"code width mismatch: {a.width} vs {b.width}")
    return (a.bits ^ b.bits).bit_count()


@lru_cache(maxsize=16)
def _projection(seed: int, dim: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((NEAR_DUP_BITS, dim))


def near_dup_signature(e: Embedding, seed: int = NEAR_DUP_SEED) -> NearDupSignature:
    """64 sign bits of fixed random projections; bit i is projection i."""
    v = np.asarray(e, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("embedding contains NaN or Inf")
    signs = _projection(seed, v.shape[0]) @ v > 0
    return NearDupSignature(int(np.packbits(signs, bitorder="little").view("<u8")[0]))


def is_near_duplicate(a: NearDupSignature, b: NearDupSignature, hamming_max: int = NEAR_DUP_HAMMING_MAX) -> bool:
    return a.distance(b) <= hamming_max


def binarize(e: Embedding, thresholds) -> BinaryEmbedding:
    """Bit i is set iff e[i] > thresholds[i]."""
    v = np.asarray(e, dtype=np.float32)
    t = np.asarray(thresholds, dtype=np.float32)
    if v.shape != t.shape:
        raise DimensionError(f"threshold dimension {t.shape} does not match embedding {v.shape}")
    packed = np.packbits(v > t, bitorder="little").tobytes()
    return BinaryEmbedding(int.from_bytes(packed, "little"), v.shape[0])


def encode_half(e: Embedding) -> bytes:
    return np.asarray(e, dtype="<f2").tobytes()


def decode_half(raw: bytes) -> Embedding:
    return as_embedding(np.frombuffer(raw, dtype="<f2"))


def encode_b64(e: Embedding) -> str:
    return base64.b64encode(encode_half(e)).decode("ascii")


def decode_b64(text: str) -> Embedding:
    return decode_half(base64.b64decode(text))


def quantize(e: Embedding) -> Embedding:
    """Round-trip through the on-disk precision."""
    return as_embedding(np.asarray(e, dtype=np.float16))


@dataclass(frozen=True)
class ImageMetadata:
    """Image-level signals consumed by the corpus filters."""

    is_inspirational: bool = True
    is_grayscale: bool = False
    is_collage_or_screenshot: bool = False
    width: int = 1024
    height: int = 1024
    blur_score: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def to_dict(self) -> dict:
        return {
            "is_inspirational": self.is_inspirational,
            "is_grayscale": self.is_grayscale,
            "is_collage_or_screenshot": self.is_collage_or_screenshot,
            "width": self.width,
            "height": self.height,
            "blur_score": self.blur_score,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageMetadata":
        return cls(
            is_inspirational=bool(d.get("is_inspirational", True)),
            is_grayscale=bool(d.get("is_grayscale", False)),
            is_collage_or_screenshot=bool(d.get("is_collage_or_screenshot", False)),
            width=int(d.get("width", 1024)),
            height=int(d.get("height", 1024)),
            blur_score=float(d.get("blur_score", 0.0)),
        )

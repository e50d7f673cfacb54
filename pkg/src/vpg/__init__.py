"""Visual product graph: scene <-> product retrieval over a feature store and HNSW indexes."""

from .ann import AnnIndex, ExactIndex, HnswParams, build_ann
from .core import BoundingBox, Category, DetectedObject, ImageMetadata, ImageSignature
from .feature_store import FeatureStore, SceneEntry
from .forward_stl import ForwardSTL, ProductCatalog, ProductEntry, TTLCache, UserContext
from .kernels import BACKEND
from .object_index import FilterConfig, ObjectIndex
from .reverse_stl import RelevanceCalibration, ReverseSTL
from .vision import SyntheticWorld, WorldConfig

__version__ = "0.1.0"

__all__ = [
    "AnnIndex",
    "BACKEND",
    "BoundingBox",
    "Category",
    "DetectedObject",
    "ExactIndex",
    "FeatureStore",
    "FilterConfig",
    "ForwardSTL",
    "HnswParams",
    "ImageMetadata",
    "ImageSignature",
    "ObjectIndex",
    "ProductCatalog",
    "ProductEntry",
    "RelevanceCalibration",
    "ReverseSTL",
    "SceneEntry",
    "SyntheticWorld",
    "TTLCache",
    "UserContext",
    "WorldConfig",
    "build_ann",
    "__version__",
]

"""Engine configuration: one TOML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .object_index import FilterConfig
from .vision import WorldConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class HnswSection(_Section):
    M: int = Field(16, ge=2, le=128)
    ef_construction: int = Field(200, ge=1)
    ef_search: int = Field(128, ge=1)
    seed: int = 100


class RelevanceSection(_Section):
    percentile: float = Field(0.75, ge=0.0, le=1.0)
    calibration_size: int = Field(200, ge=100)
    seed: int = 0


class DedupSection(_Section):
    hamming_max: int = Field(8, ge=0, le=64)


class RerankSection(_Section):
    lam: float = Field(0.5, ge=0.0, alias="lambda")
    n_out: int = Field(10, ge=1)
    k_raw: int = Field(150, ge=1)


class ForwardSection(_Section):
    max_objects: int = Field(4, ge=1)
    per_object_k: int = Field(12, ge=1)
    n_out: int = Field(3, ge=1)
    ttl_seconds: float = Field(7200.0, gt=0)
    cache_capacity: int = Field(10_000, ge=1)
    parallelism: int = Field(4, ge=1)
    batch_limit: int = Field(5, ge=1)


class ServiceSection(_Section):
    host: str = "127.0.0.1"
    port: int = Field(8080, ge=0, le=65535)


class EngineConfig(_Section):
    store_dir: Path = Path("vpg-data/store")
    index_dir: Path = Path("vpg-data/index")
    hnsw: HnswSection = HnswSection()
    relevance: RelevanceSection = RelevanceSection()
    dedup: DedupSection = DedupSection()
    rerank: RerankSection = RerankSection()
    forward: ForwardSection = ForwardSection()
    service: ServiceSection = ServiceSection()
    filters: dict[str, Any] = Field(default_factory=dict)
    world: dict[str, Any] = Field(default_factory=dict)
    online_fallback: bool = False

    def world_config(self) -> WorldConfig:
        return WorldConfig.from_mapping(self.world)

    def filter_config(self) -> FilterConfig:
        return FilterConfig.from_mapping(self.filters)

    def to_dict(self) -> dict:
        return json.loads(self.model_dump_json(by_alias=True))

    @classmethod
    def build(cls, data: dict | None = None, overrides: Iterable[str] = ()) -> "EngineConfig":
        """Validate ``data`` with overrides applied; every violation is reported."""
        data = _deep_copy(data or {})
        violations: list[str] = []
        for item in overrides:
            try:
                _apply_override(data, item)
            except ValueError as exc:
                violations.append(str(exc))
        cfg = None
        try:
            cfg = cls.model_validate(data)
        except ValidationError as exc:
            for err in exc.errors():
                loc = ".".join(str(p) for p in err["loc"]) or "<root>"
                violations.append(f"{loc}: {err['msg']}")
        for section, parse in (("world", WorldConfig.from_mapping), ("filters", FilterConfig.from_mapping)):
            raw = data.get(section, {})
            if not isinstance(raw, dict):
                continue
            try:
                parse(raw)
            except ConfigError as exc:
                violations.extend(f"{section}: {v}" for v in exc.violations)
            except TypeError as exc:
                violations.append(f"{section}: {exc}")
        if violations:
            raise ConfigError(violations)
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> "EngineConfig":
        return cls.build(read_toml(path) if path is not None else {}, overrides)


def read_toml(path: str | os.PathLike) -> dict:
    """Parse a TOML (or flat ``key = value``) file; syntax errors become ConfigError."""
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc


def _deep_copy(d):
    return json.loads(json.dumps(d, default=str))


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _apply_override(data: dict, item: str) -> None:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ValueError(f"override {item!r} is not of the form section.key=value")
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"override {item!r}: {p} is not a section")
    node[parts[-1]] = _parse_scalar(value.strip())

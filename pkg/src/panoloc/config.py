"""Pipeline configuration: nested per-stage configs, ablation flags, and a
flat `section.key = value` representation used by config files, the CLI
`--set` overrides, and the database manifest snapshot."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from panoloc.association import AssociationConfig
from panoloc.pose import RansacConfig
from panoloc.projection import ProjectionConfig
from panoloc.retrieval import RetrievalConfig


@dataclass(frozen=True)
class MapConfig:
    sample_interval_m: float = 1.0
    max_dist_m: float = 50.0

    def __post_init__(self):
        if self.sample_interval_m <= 0 or self.max_dist_m <= 0:
            raise ValueError("map parameters must be positive")


@dataclass(frozen=True)
class FeatureConfig:
    global_extractor: str = "hog-gist"
    local_extractor: str = "harris-patch"
    match_ratio: float = 0.85
    max_keypoints: int = 1024
    second_max_keypoints: int = 512


@dataclass(frozen=True)
class ClaheConfig:
    clip_limit: float = 2.0
    tiles: int = 8


@dataclass(frozen=True)
class AblationConfig:
    use_equalization: bool = True
    use_covis_cluster: bool = True
    use_two_stage: bool = True
    use_covis_filter: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    mapping: MapConfig = field(default_factory=MapConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    pipeline: AblationConfig = field(default_factory=AblationConfig)

    # convenience accessors used across the pipeline
    @property
    def use_hec(self) -> bool:
        return self.projection.use_hec

    @property
    def use_equalization(self) -> bool:
        return self.pipeline.use_equalization

    @property
    def use_covis_cluster(self) -> bool:
        return self.pipeline.use_covis_cluster

    @property
    def use_two_stage(self) -> bool:
        return self.pipeline.use_two_stage

    @property
    def use_covis_filter(self) -> bool:
        return self.pipeline.use_covis_filter

    @property
    def sample_interval_m(self) -> float:
        return self.mapping.sample_interval_m

    @property
    def max_dist_m(self) -> float:
        return self.mapping.max_dist_m

    @property
    def clahe_clip_limit(self) -> float:
        return self.clahe.clip_limit

    @property
    def clahe_tiles(self) -> int:
        return self.clahe.tiles

    @property
    def global_extractor(self) -> str:
        return self.features.global_extractor

    @property
    def local_extractor(self) -> str:
        return self.features.local_extractor

    @property
    def max_keypoints(self) -> int:
        return self.features.max_keypoints

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        flat = self.to_flat_dict()
        for key, value in overrides.items():
            if key not in flat:
                raise ValueError(f"unknown config key: {key!r}")
            flat[key] = value
        return PipelineConfig.from_flat_dict(flat)

    def to_flat_dict(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for section in fields(self):
            sub = getattr(self, section.name)
            for f in fields(sub):
                out[f"{section.name}.{f.name}"] = _render(getattr(sub, f.name))
        return out

    @staticmethod
    def from_flat_dict(flat: dict[str, str]) -> "PipelineConfig":
        defaults = PipelineConfig()
        per_section: dict[str, dict[str, object]] = {s.name: {} for s in fields(defaults)}
        section_fields = {
            s.name: {f.name: f for f in fields(getattr(defaults, s.name))}
            for s in fields(defaults)
        }
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if section not in per_section or name not in section_fields[section]:
                raise ValueError(f"unknown config key: {key!r}")
            default_value = getattr(getattr(defaults, section), name)
            per_section[section][name] = _parse(value, type(default_value))
        return PipelineConfig(**{
            s.name: replace(getattr(defaults, s.name), **per_section[s.name])
            for s in fields(defaults)
        })


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, typ: type):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"invalid boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Read a `section.key = value` config file; unknown keys are rejected."""
    flat = PipelineConfig().to_flat_dict()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key = key.strip()
            if key not in flat:
                raise ValueError(f"{path}:{lineno}: unknown config key: {key!r}")
            flat[key] = value.strip()
    cfg = PipelineConfig.from_flat_dict(flat)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg

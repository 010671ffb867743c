"""Structured run configuration: YAML file + flag overrides, flags winning.

Unknown keys anywhere in the file are rejected with their full path. Every
command writes the fully resolved configuration next to its outputs so a run
can be reproduced from the snapshot alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoders import EncoderConfig
from .errors import UsageError
from .fusion import FusionConfig
from .knowledge import KnowledgeConfig
from .preprocess import AugmentConfig, CanonicalGeometry
from .synthetic import SyntheticConfig
from .training import TrainConfig

LEVELS = ("disorder", "icd")


@dataclass
class CorpusPaths:
    manifest: str | None = None
    icd_map: str | None = None
    knowledge_base: str | None = None
    knowledge_encoder: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    level: str = "disorder"
    corpus: CorpusPaths = field(default_factory=CorpusPaths)
    generate: SyntheticConfig = field(default_factory=SyntheticConfig)
    geometry: CanonicalGeometry = field(default_factory=CanonicalGeometry)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    knowledge: KnowledgeConfig = field(default_factory=KnowledgeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


# Keys owned by another section are not configurable locally: the encoder's
# input geometry comes from `geometry`, and embedding widths follow
# `encoder.embed_dim`.
_EXCLUDED_KEYS = {
    "encoder": {"height", "width", "depth"},
    "fusion": {"embed_dim"},
    "knowledge": {"embed_dim"},
}

_TUPLE_KEYS = {"noise_sigma", "gamma", "cube_size"}


def _build_section(dc_type, data, path, excluded=frozenset()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise UsageError(f"config section {path!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(dc_type)} - excluded
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config key {path}.{unknown[0]}")
    kwargs = {}
    for k, v in data.items():
        if k in _TUPLE_KEYS and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError, UsageError) as e:
        raise UsageError(f"invalid config section {path!r}: {e}") from e


_SECTIONS = {
    "corpus": CorpusPaths,
    "generate": SyntheticConfig,
    "geometry": CanonicalGeometry,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "knowledge": KnowledgeConfig,
    "train": TrainConfig,
}

_SCALARS = ("seed", "out", "level")


def build_config(data) -> RunConfig:
    """Build a RunConfig from a nested dict, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise UsageError("config root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]}")
    sections = {}
    for name, dc_type in _SECTIONS.items():
        sections[name] = _build_section(
            dc_type, data.get(name), name, _EXCLUDED_KEYS.get(name, frozenset())
        )
    cfg = RunConfig(
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "runs/out")),
        level=str(data.get("level", "disorder")),
        **sections,
    )
    if cfg.level not in LEVELS:
        raise UsageError(f"level must be one of {LEVELS}")
    # Propagate owned keys across sections.
    g = cfg.geometry
    cfg.encoder = dataclasses.replace(
        cfg.encoder, height=g.height, width=g.width, depth=g.depth
    )
    cfg.fusion = dataclasses.replace(cfg.fusion, embed_dim=cfg.encoder.embed_dim)
    cfg.knowledge = dataclasses.replace(cfg.knowledge, embed_dim=cfg.encoder.embed_dim)
    return cfg


def apply_overrides(data, overrides):
    """Apply dotted-path overrides (from CLI flags) onto the raw config dict."""
    data = dict(data or {})
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = {}
                node[p] = nxt
            elif not isinstance(nxt, dict):
                raise UsageError(f"cannot override {dotted}: {p} is not a section")
            node = nxt
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        with open(p, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise UsageError(f"invalid YAML in {p}: {e}") from e
    if overrides:
        data = apply_overrides(data, overrides)
    return build_config(data)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, (list, dict, str, int, float, bool)) or value is None:
        return value
    return str(value)


def resolved_dict(cfg: RunConfig):
    return _plain(cfg)


def write_resolved(cfg: RunConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(resolved_dict(cfg), f, sort_keys=True)

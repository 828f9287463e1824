"""Hierarchical run configuration: TOML files, environment overrides, and a
deterministic resolved dump.

Every knob carries its published default; unknown keys fail at load time.
Environment variables of the form ``UNCONKED__SECTION__KEY`` override file
values, with TOML-literal parsing of the value.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib  # type: ignore[no-redef]
from pathlib import Path
from typing import Any, Optional

from .augmentation import HsvRanges, NoiseSpec
from .errors import ConfigError
from .geometry import AffineRanges, RansacConfig

ENV_PREFIX = "UNCONKED__"
SCHEMA_VERSION = 1


@dataclass
class AugmentationSection:
    rotation_deg: tuple = (-60.0, 60.0)
    translate_frac: tuple = (-0.25, 0.25)
    scale: tuple = (0.75, 1.25)
    shear_deg: tuple = (-30.0, 30.0)
    hue_deg: tuple = (-18.0, 18.0)
    saturation: tuple = (0.8, 1.2)
    value: tuple = (0.8, 1.2)
    noise_std: float = 0.05
    noise_prob: float = 0.25
    roi_threshold: float = 0.06
    roi_restricted: bool = True

    def affine_ranges(self) -> AffineRanges:
        return AffineRanges(
            rotation_deg=tuple(self.rotation_deg),
            translate_frac=tuple(self.translate_frac),
            scale=tuple(self.scale),
            shear_deg=tuple(self.shear_deg),
        )

    def hsv_ranges(self) -> HsvRanges:
        return HsvRanges(
            hue_deg=tuple(self.hue_deg),
            saturation=tuple(self.saturation),
            value=tuple(self.value),
        )

    def noise(self) -> NoiseSpec:
        return NoiseSpec(std=self.noise_std, prob=self.noise_prob)


@dataclass
class BatchSection:
    n_views: int = 9           # batch is n_views + 1 images
    descriptor_points: int = 1460
    detector_points: int = 250
    image_size: int = 565

    def __post_init__(self):
        if self.n_views < 1 or self.image_size < 8:
            raise ConfigError("invalid batch geometry")
        if self.descriptor_points < 2 or self.detector_points < 2:
            raise ConfigError("point counts must be >= 2")


@dataclass
class FastApSection:
    bins: int = 10

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("fastap.bins must be >= 2")


@dataclass
class DescriptorSection:
    dim: int = 128
    channels: tuple = (32, 32, 64, 64, 128, 128)
    dilations: tuple = (1, 1, 2, 2, 4, 4)
    lr: float = 1e-4
    epochs: int = 1000
    max_steps: int = 0          # 0 = no cap
    checkpoint_interval: int = 50  # epochs

    def __post_init__(self):
        if len(self.channels) != len(self.dilations):
            raise ConfigError("descriptor.channels and dilations must match")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("invalid descriptor optimizer settings")


@dataclass
class DetectorSection:
    base_channels: int = 32
    depth: int = 4
    lr: float = 1e-4
    epochs: int = 400
    max_steps: int = 0
    checkpoint_interval: int = 50
    target_kind: str = "ss"
    restrict_to_roi: bool = True

    def __post_init__(self):
        if self.target_kind not in ("ap", "ss"):
            raise ConfigError(f"detector.target_kind must be 'ap' or 'ss', got {self.target_kind!r}")
        if self.lr <= 0 or self.epochs < 1 or self.depth < 1:
            raise ConfigError("invalid detector settings")


@dataclass
class InferenceSection:
    image_size: int = 565
    k_keypoints: int = 500      # 0 = every NMS extremum in the RoI
    m_matches: int = 0          # 0 = keep all mutual-NN matches
    nms_window: int = 11
    ratio_test: float = 0.0     # 0 = off

    def __post_init__(self):
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ConfigError("inference.nms_window must be odd and >= 1")
        if self.k_keypoints < 0 or self.m_matches < 0:
            raise ConfigError("negative keypoint/match counts")


@dataclass
class RansacSection:
    reproj_threshold_px: float = 5.0
    max_iters: int = 2000
    min_inliers: int = 4
    confidence: float = 0.999
    max_anisotropy: float = 20.0

    def to_config(self) -> RansacConfig:
        return RansacConfig(
            reproj_threshold_px=self.reproj_threshold_px,
            max_iters=self.max_iters,
            min_inliers=self.min_inliers,
            confidence=self.confidence,
            max_anisotropy=self.max_anisotropy,
        )


@dataclass
class EvaluationSection:
    max_threshold_px: int = 25
    control_points: int = 5000
    rotation_deg: tuple = (-45.0, 45.0)
    scale: tuple = (0.9, 1.1)
    shear_deg: tuple = (-10.0, 10.0)

    def affine_ranges(self) -> AffineRanges:
        return AffineRanges(
            rotation_deg=tuple(self.rotation_deg),
            translate_frac=(0.0, 0.0),
            scale=tuple(self.scale),
            shear_deg=tuple(self.shear_deg),
        )


@dataclass
class SeedsSection:
    augmentation: int = 0
    sampling: int = 1
    ransac: int = 2


@dataclass
class DataSection:
    images: str = ""
    masks: str = ""


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class RunConfig:
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    batch: BatchSection = field(default_factory=BatchSection)
    fastap: FastApSection = field(default_factory=FastApSection)
    descriptor: DescriptorSection = field(default_factory=DescriptorSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(section: str, key: str, value: Any, target: Any) -> Any:
    if isinstance(target, (tuple, list)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{section}.{key} must be an array")
        return tuple(value)
    if isinstance(target, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{section}.{key} must be an integer")
        return int(value)
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        return float(value)
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        return value
    return value


def _apply(config: RunConfig, section: str, key: str, value: Any) -> None:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    sec = getattr(config, section)
    names = {f.name for f in fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key}")
    coerced = _coerce(section, key, value, getattr(sec, key))
    object.__setattr__(sec, key, coerced)


def _revalidate(config: RunConfig) -> RunConfig:
    # rebuild each section so __post_init__ validation reruns on overrides
    rebuilt = {}
    for f in fields(RunConfig):
        sec = getattr(config, f.name)
        rebuilt[f.name] = type(sec)(**{g.name: getattr(sec, g.name) for g in fields(sec)})
    cfg = RunConfig(**rebuilt)
    # cross-checks not expressible per-section
    cfg.augmentation.affine_ranges()
    cfg.augmentation.hsv_ranges()
    cfg.augmentation.noise()
    cfg.evaluation.affine_ranges()
    cfg.ransac.to_config()
    return cfg


def _parse_env_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_env_overrides(config: RunConfig, environ=None) -> RunConfig:
    env = os.environ if environ is None else environ
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        if len(parts) != 2:
            raise ConfigError(f"malformed override variable {name}")
        section, key = parts[0].lower(), parts[1].lower()
        _apply(config, section, key, _parse_env_value(raw))
    return _revalidate(config)


def load_config(path: Optional[str | Path] = None, environ=None) -> RunConfig:
    """Build a RunConfig from defaults, an optional TOML file, then env vars."""
    config = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            tree = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error in {p}: {exc}") from exc
        for section, table in tree.items():
            if not isinstance(table, dict):
                raise ConfigError(f"top-level config entry {section!r} must be a table")
            for key, value in table.items():
                _apply(config, section, key, value)
    return apply_env_overrides(config, environ=environ)


def resolved_dump(config: RunConfig) -> str:
    """Canonical JSON of the fully-resolved configuration (stable ordering)."""
    tree: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    for f in fields(RunConfig):
        sec = getattr(config, f.name)
        tree[f.name] = {g.name: getattr(sec, g.name) for g in fields(sec)}
    return json.dumps(tree, sort_keys=True, indent=2, default=list)

"""
Configuration for the SLAM engine.

Config files are plain text, one ``section.key = value`` per line::

    # tracking
    tracking.gate_radius = 0.1
    keyframes.mapping_interval = 8
    mapping.background = [0.0, 0.0, 0.0]

Unknown sections or keys are rejected so that typos surface immediately.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', validate_assignment=True)


class TrackingConfig(_Section):
    gate_radius: float = Field(0.1, ge=0.0)
    max_iters: int = Field(30, ge=1)
    tol: float = Field(1e-6, gt=0.0)
    stride: int = Field(2, ge=1)
    epsilon: float = Field(1e-3, gt=0.0)
    k_neighbors: int = Field(10, ge=4)
    min_matches: int = Field(10, ge=1)
    max_halvings: int = Field(8, ge=0)
    covariance_mode: Literal['plane', 'isotropic', 'raw'] = 'plane'


class KeyframeConfig(_Section):
    corr_ratio_threshold: float = Field(0.9, gt=0.0, lt=1.0)
    mapping_interval: int = Field(8, ge=1)


class MappingConfig(_Section):
    seed_stride: int = Field(4, ge=1)
    base_scale: float = Field(0.02, gt=0.0)
    p_exponent: float = Field(0.333, ge=0.0)
    initial_opacity: float = Field(0.7, ge=0.0, le=1.0)
    gate_factor: float = Field(0.5, ge=0.0)
    iters_per_keyframe: int = Field(10, ge=0)
    final_iters: int = Field(200, ge=0)
    prune_opacity: float = Field(0.005, ge=0.0, le=1.0)
    prune_every: int = Field(50, ge=1)
    near: float = Field(0.05, gt=0.0)
    far: float = Field(10.0, gt=0.0)
    representation: Literal['disk', 'isotropic'] = 'disk'
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    @model_validator(mode='after')
    def _check_planes(self):
        if self.far <= self.near:
            raise ValueError(f"far ({self.far}) must exceed near ({self.near})")
        return self


class LossConfig(_Section):
    lambda_p: float = Field(1.0, ge=0.0)
    lambda_d: float = Field(0.1, ge=0.0)
    lambda_gan: float = Field(0.05, ge=0.0)


class LearningRateConfig(_Section):
    center: float = Field(1.6e-4, ge=0.0)
    frame: float = Field(1e-3, ge=0.0)
    scales: float = Field(5e-3, ge=0.0)
    color: float = Field(2.5e-3, ge=0.0)
    opacity: float = Field(5e-2, ge=0.0)


class EvalConfig(_Section):
    voxel_size: float = Field(0.01, gt=0.0)
    truncation: float = Field(0.04, gt=0.0)
    mesh_samples: int = Field(100000, ge=1)
    prf_threshold: float = Field(0.01, gt=0.0)
    association_tolerance: float = Field(0.02, gt=0.0)
    seed: int = 0

    @model_validator(mode='after')
    def _check_truncation(self):
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least twice the voxel size")
        return self


class RuntimeConfig(_Section):
    seed: int = 0
    threads: int = Field(1, ge=1)
    deterministic: bool = False
    tile_size: int = Field(16, ge=1)


class SlamConfig(_Section):
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)
    keyframes: KeyframeConfig = Field(default_factory=KeyframeConfig)
    mapping: MappingConfig = Field(default_factory=MappingConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    learning_rates: LearningRateConfig = Field(default_factory=LearningRateConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    def to_text(self) -> str:
        """Serialize to the ``section.key = value`` format."""
        lines = []
        for section_name, section in self.model_dump().items():
            lines.append(f"# {section_name}")
            for key, value in section.items():
                lines.append(f"{section_name}.{key} = {json.dumps(value)}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'SlamConfig':
        """Return a copy with dotted-key overrides applied (``{'loss.lambda_gan': 0}``)."""
        data = self.model_dump()
        for dotted, value in overrides.items():
            section, key = _split_key(dotted)
            if section not in data or key not in data[section]:
                raise ConfigError(f"unknown config key '{dotted}'")
            data[section][key] = value
        return _validate(data)


def _split_key(dotted: str) -> Tuple[str, str]:
    if dotted.count('.') != 1:
        raise ConfigError(f"config key '{dotted}' must look like section.key")
    section, key = dotted.split('.')
    return section.strip(), key.strip()


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        lowered = raw.lower()
        if lowered in ('true', 'false'):
            return lowered == 'true'
        return raw.strip('"\'')


def _validate(data: Dict[str, Any]) -> SlamConfig:
    try:
        return SlamConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def parse_config_text(text: str) -> SlamConfig:
    """
    Parse config text into a validated SlamConfig.

    Args:
        text: Contents of a ``section.key = value`` file

    Returns:
        Validated configuration; unspecified keys keep their defaults
    """
    defaults = SlamConfig().model_dump()
    data: Dict[str, Dict[str, Any]] = {name: {} for name in defaults}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise ConfigError(f"line {line_number}: expected 'section.key = value', got '{line.strip()}'")
        dotted, raw_value = stripped.split('=', 1)
        section, key = _split_key(dotted.strip())
        if section not in defaults:
            raise ConfigError(f"line {line_number}: unknown config section '{section}'")
        if key not in defaults[section]:
            raise ConfigError(f"line {line_number}: unknown config key '{section}.{key}'")
        data[section][key] = _parse_value(raw_value)
    return _validate(data)


def load_config(path: Optional[Union[str, Path]] = None) -> SlamConfig:
    """
    Load configuration from a file (or defaults) and apply environment overrides.

    Args:
        path: Config file path; None means defaults only

    Returns:
        Validated configuration
    """
    if path is None:
        config = SlamConfig()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        config = parse_config_text(path.read_text(encoding='utf-8'))
    return apply_environment(config)


def apply_environment(config: SlamConfig) -> SlamConfig:
    """Apply G2S_THREADS / G2S_DETERMINISTIC (and any .env file) to the runtime section."""
    load_dotenv()
    overrides: Dict[str, Any] = {}
    threads = os.getenv('G2S_THREADS')
    if threads:
        try:
            overrides['runtime.threads'] = max(1, int(threads))
        except ValueError as e:
            raise ConfigError(f"G2S_THREADS must be an integer, got '{threads}'") from e
    if os.getenv('G2S_DETERMINISTIC') is not None:
        overrides['runtime.deterministic'] = os.getenv('G2S_DETERMINISTIC') == '1'
    return config.with_overrides(overrides) if overrides else config

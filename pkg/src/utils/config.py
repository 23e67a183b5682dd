"""
Training configuration read from YAML.

A configuration file mirrors :class:`TrainConfig`::

    seed: 0
    area_margin: 1
    validation_fraction: 0.0
    prep:
      orientation_count: 6
      smoothing_radius: 1
    structure:
      table_count: 50
      bit_count: 11
      calculator: fern        # or tree, with stage_sizes / split_factors
    growth:
      candidate_count: 40
    loss:
      kind: softmax

Every key is optional; unknown keys are rejected.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from src.features.channels import PrepConfig
from src.features.words import DEFAULT_PATCH_SIZE, MAX_WORD_BITS
from src.training.growth import GrowthConfig
from src.training.losses import LossConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "CTE_DATA_DIR"


@dataclass(frozen=True)
class StructureConfig:
    table_count: int = 50
    bit_count: int = 11
    calculator: str = "fern"
    stage_sizes: Tuple[int, ...] = ()
    split_factors: Tuple[int, ...] = ()
    patch_size: int = DEFAULT_PATCH_SIZE
    allow_get_bit_on_any_channel: bool = False

    @property
    def is_tree(self) -> bool:
        return self.calculator == "tree"

    @property
    def total_bits(self) -> int:
        return sum(self.stage_sizes) if self.is_tree else self.bit_count

    @property
    def shape_tag(self) -> str:
        """Short description used in sweep outputs, e.g. ``fern`` or ``4-4-3/2-2``"""
        if not self.is_tree:
            return "fern"
        stages = "-".join(str(k) for k in self.stage_sizes)
        splits = "-".join(str(q) for q in self.split_factors)
        return f"{stages}/{splits}"

    def validate(self):
        if self.calculator not in ("fern", "tree"):
            raise ConfigError(f"structure.calculator must be 'fern' or 'tree', got {self.calculator!r}")
        if self.table_count < 0:
            raise ConfigError(f"structure.table_count must be >= 0, got {self.table_count}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"structure.patch_size must be a positive odd number, got {self.patch_size}")
        if self.is_tree:
            if not self.stage_sizes or any(k < 1 for k in self.stage_sizes):
                raise ConfigError(f"structure.stage_sizes must list sizes >= 1, got {self.stage_sizes}")
            if len(self.split_factors) != len(self.stage_sizes) - 1 or any(q < 1 for q in self.split_factors):
                raise ConfigError(
                    f"structure.split_factors needs {len(self.stage_sizes) - 1} entries >= 1, "
                    f"got {self.split_factors}"
                )
        if not 1 <= self.total_bits <= MAX_WORD_BITS:
            raise ConfigError(f"Word length must lie in 1..{MAX_WORD_BITS}, got {self.total_bits}")


@dataclass(frozen=True)
class TrainConfig:
    prep: PrepConfig = field(default_factory=PrepConfig)
    structure: StructureConfig = field(default_factory=StructureConfig)
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    area_margin: int = 1
    validation_fraction: float = 0.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        self.prep.validate()
        self.structure.validate()
        self.growth.validate()
        self.loss.validate()
        if self.area_margin < 0:
            raise ConfigError(f"area_margin must be >= 0, got {self.area_margin}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        return self


_SECTIONS = {
    "prep": PrepConfig,
    "structure": StructureConfig,
    "growth": GrowthConfig,
    "loss": LossConfig,
}


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        return tuple(int(v) for v in value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} has invalid value {value!r}")
    return value


def _update(instance, values: Dict[str, Any], prefix: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping, got {values!r}")
    known = {f.name: f for f in fields(instance)}
    changes = {}
    for key, value in values.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"Unknown configuration key {name!r}")
        current = getattr(instance, key)
        if key in _SECTIONS and not prefix:
            changes[key] = _update(current, value, f"{key}.")
        else:
            changes[key] = _coerce(name, value, current)
    return replace(instance, **changes)


def config_from_dict(values: Optional[Dict[str, Any]], base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    Overlay a (possibly nested, partial) mapping on a configuration

    Raises:
        ConfigError: unknown key or invalid value
    """
    config = base or TrainConfig()
    if values:
        config = _update(config, values, "")
    return config.validate()


def config_to_dict(config: TrainConfig) -> Dict[str, Any]:
    """Plain nested mapping; tuples become lists so it dumps as YAML"""
    def plain(value):
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, (tuple, list)):
            return [plain(v) for v in value]
        return value
    return plain(asdict(config))


def _read_yaml(path: Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Configuration file not found: {path}")
    try:
        with open(path) as handle:
            return yaml.safe_load(handle)
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse {path}: {e}")


def load_config(path: Optional[Path] = None) -> TrainConfig:
    """Read a training configuration; no path gives the defaults"""
    if path is None:
        return TrainConfig().validate()
    config = config_from_dict(_read_yaml(path) or {})
    logger.info("Loaded configuration from %s", path)
    return config


def save_config(config: TrainConfig, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as handle:
        yaml.safe_dump(config_to_dict(config), handle, sort_keys=False)


@dataclass(frozen=True)
class SweepPoint:
    point_id: str
    config: TrainConfig


def load_sweep(path: Path) -> List[SweepPoint]:
    """
    Read a Pareto sweep: a ``base`` configuration plus a list of ``points``

    Each point is a partial configuration with an optional ``id``::

        base: {structure: {bit_count: 8}}
        points:
          - {id: m5, structure: {table_count: 5}}
          - {id: m10, structure: {table_count: 10}}
    """
    spec = _read_yaml(path) or {}
    if not isinstance(spec, dict) or "points" not in spec:
        raise ConfigError(f"Sweep file {path} needs a 'points' list")
    unknown = set(spec) - {"base", "points"}
    if unknown:
        raise ConfigError(f"Unknown sweep keys {sorted(unknown)} in {path}")
    base = config_from_dict(spec.get("base") or {})
    points = []
    for index, entry in enumerate(spec["points"] or []):
        entry = dict(entry or {})
        point_id = str(entry.pop("id", f"p{index}"))
        points.append(SweepPoint(point_id, config_from_dict(entry, base)))
    return points


def default_data_dir() -> Path:
    """``CTE_DATA_DIR`` when set, otherwise ``data/`` at the project root"""
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    root_dir = Path(__file__).resolve().parents[2]
    return root_dir / "data"

# config.py - Experiment configuration types, YAML/.env loading and seeded RNG streams
import hashlib
import logging
import os
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml
from dotenv import load_dotenv

logger = logging.getLogger(__name__)

WEIGHT_TOLERANCE = 1e-12
ALGORITHMS = ("hier_signsgd", "hier_sgd", "hier_signsgd_quantized")


class ConfigError(ValueError):
    """Raised for any invalid or inconsistent experiment configuration."""


class TiePolicy(str, Enum):
    RANDOM = "random"
    PLUS_ONE = "plus_one"
    ZERO = "zero"


class PartitionMode(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"


# === HIERARCHY ===
@dataclass(frozen=True)
class Hierarchy:
    """Q edge clusters with exact integer shard sizes and derived weights."""

    shard_sizes: Tuple[Tuple[int, ...], ...]
    edge_sizes: Tuple[int, ...] = field(init=False)
    total_samples: int = field(init=False)
    edge_weights: Tuple[float, ...] = field(init=False)
    device_weights: Tuple[Tuple[float, ...], ...] = field(init=False)

    def __post_init__(self):
        if not self.shard_sizes:
            raise ConfigError("hierarchy needs at least one edge")
        for q, shards in enumerate(self.shard_sizes):
            if len(shards) == 0:
                raise ConfigError(f"edge {q} has no devices")
            for k, size in enumerate(shards):
                if int(size) != size or size < 1:
                    raise ConfigError(f"device ({q}, {k}) has invalid shard size {size}")

        edge_sizes = tuple(int(sum(shards)) for shards in self.shard_sizes)
        total = int(sum(edge_sizes))
        object.__setattr__(self, "edge_sizes", edge_sizes)
        object.__setattr__(self, "total_samples", total)
        object.__setattr__(self, "edge_weights", tuple(size / total for size in edge_sizes))
        object.__setattr__(
            self,
            "device_weights",
            tuple(
                tuple(size / edge_sizes[q] for size in shards)
                for q, shards in enumerate(self.shard_sizes)
            ),
        )

    @property
    def num_edges(self) -> int:
        return len(self.shard_sizes)

    @property
    def devices_per_edge(self) -> Tuple[int, ...]:
        return tuple(len(shards) for shards in self.shard_sizes)

    @property
    def num_devices(self) -> int:
        return sum(self.devices_per_edge)

    def devices(self):
        """Yield (edge, device) pairs in fixed id order."""
        for q, shards in enumerate(self.shard_sizes):
            for k in range(len(shards)):
                yield q, k


def derive_weights(raw_shard_sizes: Sequence[Sequence[int]]) -> Hierarchy:
    """Build a Hierarchy from per-device sample counts grouped by edge."""
    hierarchy = Hierarchy(tuple(tuple(int(s) for s in shards) for shards in raw_shard_sizes))
    if abs(sum(hierarchy.edge_weights) - 1.0) > WEIGHT_TOLERANCE:
        raise ConfigError("edge weights do not sum to one")
    return hierarchy


# === SCHEDULE & FRIENDS ===
@dataclass(frozen=True)
class Schedule:
    global_rounds: int = 30
    edge_rounds: int = 30
    step_size: float = 5e-3
    batch_size: int = 400
    tie_policy: TiePolicy = TiePolicy.RANDOM
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tie_policy", TiePolicy(self.tie_policy))
        if self.global_rounds < 1:
            raise ConfigError("schedule.global_rounds must be >= 1")
        if self.edge_rounds < 1:
            raise ConfigError("schedule.edge_rounds must be >= 1")
        if not self.step_size >= 0:
            raise ConfigError("schedule.step_size must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("schedule.batch_size must be >= 1")


@dataclass(frozen=True)
class DownlinkConfig:
    enabled: bool = False
    active_components: Optional[int] = None
    # Alternative to active_components, resolved against d at run time.
    ratio: Optional[float] = None

    def __post_init__(self):
        if self.active_components is not None and self.active_components < 1:
            raise ConfigError("downlink.active_components must be >= 1")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ConfigError("downlink.ratio must lie in (0, 1]")

    def resolve(self, dimension: int) -> int:
        """Number of active components n for a model of dimension d."""
        if self.active_components is not None:
            n = self.active_components
        elif self.ratio is not None:
            n = max(1, int(round(self.ratio * dimension)))
        else:
            n = dimension
        if not 1 <= n <= dimension:
            raise ConfigError(f"downlink active components {n} outside [1, {dimension}]")
        return n


@dataclass(frozen=True)
class PartitionSpec:
    mode: PartitionMode = PartitionMode.IID
    alpha: float = 0.3
    rng_seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        object.__setattr__(self, "mode", PartitionMode(self.mode))
        if self.mode is PartitionMode.DIRICHLET and not self.alpha > 0:
            raise ConfigError("partition.alpha must be > 0 in dirichlet mode")
        if self.max_retries < 0:
            raise ConfigError("partition.max_retries must be >= 0")


@dataclass(frozen=True)
class ModelSection:
    input_dim: int = 784
    hidden_units: int = 30
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "sigmoid", "tanh"):
            raise ConfigError(f"model.activation '{self.activation}' is not supported")


@dataclass(frozen=True)
class DataSection:
    train_images: str = "emnist-digits-train-images-idx3-ubyte.gz"
    train_labels: str = "emnist-digits-train-labels-idx1-ubyte.gz"
    test_images: str = "emnist-digits-test-images-idx3-ubyte.gz"
    test_labels: str = "emnist-digits-test-labels-idx1-ubyte.gz"
    data_dir: Optional[str] = None
    subsample: Optional[int] = None
    num_classes: int = 10

    def resolve(self, name: str) -> Path:
        """Resolve a dataset file against data_dir, then HIERSIGN_DATA_DIR."""
        path = Path(getattr(self, name))
        if path.is_absolute():
            return path
        base = self.data_dir or os.getenv("HIERSIGN_DATA_DIR") or "."
        return Path(base) / path


@dataclass(frozen=True)
class EvaluationSection:
    grad_batch: int = 4096
    eval_chunk: int = 8192
    # Cap on samples used for train/test metrics; None evaluates everything.
    max_eval_samples: Optional[int] = None


@dataclass(frozen=True)
class BaselineSection:
    step_size: float = 1.0


@dataclass(frozen=True)
class SyntheticSection:
    dimension: int = 50
    curvature_min: float = 0.5
    curvature_max: float = 2.0
    noise_std: float = 1.0
    optimum_scale: float = 1.0
    device_offset_std: float = 0.0


@dataclass(frozen=True)
class AnalysisSection:
    emit_bounds: bool = False
    zeta_probes: int = 0
    # Assumed L and sigma for MLP bound rows; the quadratic knows its own.
    smoothness: Optional[float] = None
    noise_bound: Optional[float] = None

    def __post_init__(self):
        if self.zeta_probes < 0:
            raise ConfigError("analysis.zeta_probes must be >= 0")
        for key in ("smoothness", "noise_bound"):
            value = getattr(self, key)
            if value is not None and not value > 0:
                raise ConfigError(f"analysis.{key} must be positive")


@dataclass(frozen=True)
class ExperimentSection:
    algorithm: str = "hier_signsgd"
    reporting_interval_s: float = 0.01
    checkpoint: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"experiment.algorithm must be one of {sorted(ALGORITHMS)}")
        if not self.reporting_interval_s > 0:
            raise ConfigError("experiment.reporting_interval_s must be positive")


@dataclass(frozen=True)
class HierarchySection:
    devices_per_edge: Tuple[int, ...] = (5, 5, 5, 5)

    def __post_init__(self):
        object.__setattr__(self, "devices_per_edge", tuple(int(m) for m in self.devices_per_edge))
        if not self.devices_per_edge:
            raise ConfigError("hierarchy.devices_per_edge must list at least one edge")
        for q, m in enumerate(self.devices_per_edge):
            if m < 1:
                raise ConfigError(f"hierarchy.devices_per_edge[{q}] must be >= 1")


@dataclass(frozen=True)
class LoggingSection:
    level: str = "INFO"


@dataclass(frozen=True)
class ExperimentConfig:
    """Root of the YAML schema; one frozen section per top-level key."""

    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    hierarchy: HierarchySection = field(default_factory=HierarchySection)
    schedule: Schedule = field(default_factory=Schedule)
    downlink: DownlinkConfig = field(default_factory=DownlinkConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    logging: LoggingSection = field(default_factory=LoggingSection)

    def __post_init__(self):
        if self.experiment.algorithm == "hier_signsgd_quantized" and not self.downlink.enabled:
            raise ConfigError("experiment.algorithm hier_signsgd_quantized needs downlink.enabled: true")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(self)


def _to_plain(value: Any) -> Any:
    if is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in fields(value) if f.init}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    return value


def _build_section(cls, raw: Any, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"'{path}' must be a mapping")
    known = {f.name: f for f in fields(cls) if f.init}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def config_from_dict(raw: Optional[Dict[str, Any]]) -> ExperimentConfig:
    """Build an ExperimentConfig; unknown sections or keys are a hard error."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    section_types = {
        "experiment": ExperimentSection,
        "hierarchy": HierarchySection,
        "schedule": Schedule,
        "downlink": DownlinkConfig,
        "partition": PartitionSpec,
        "model": ModelSection,
        "data": DataSection,
        "evaluation": EvaluationSection,
        "baseline": BaselineSection,
        "synthetic": SyntheticSection,
        "analysis": AnalysisSection,
        "logging": LoggingSection,
    }
    built = {}
    for key, value in raw.items():
        if key not in section_types:
            raise ConfigError(f"unknown config section '{key}'")
        built[key] = _build_section(section_types[key], value, key)
    return _apply_env(ExperimentConfig(**built))


def _apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill environment-driven defaults (.env is loaded first)."""
    load_dotenv()
    level = os.getenv("HIERSIGN_LOG_LEVEL")
    if level and cfg.logging == LoggingSection():
        cfg = replace(cfg, logging=LoggingSection(level=level.upper()))
    data_dir = os.getenv("HIERSIGN_DATA_DIR")
    if data_dir and cfg.data.data_dir is None:
        cfg = replace(cfg, data=replace(cfg.data, data_dir=data_dir))
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Load the YAML experiment file (None gives the documented defaults)."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}") from e
    logger.debug("loaded config from %s", path)
    return config_from_dict(raw)


def env_workers(default: int = 1) -> int:
    load_dotenv()
    value = os.getenv("HIERSIGN_WORKERS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError as e:
        raise ConfigError(f"HIERSIGN_WORKERS must be an integer, got '{value}'") from e


def configure_logging(level: str = "INFO") -> None:
    """Install one stream handler on the root logger."""
    numeric = logging.getLevelName(str(level).upper())
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{level}'")
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(numeric)


# === RNG STREAMS ===
class StreamLabel(NamedTuple):
    """Coordinates of a random stream; None means 'not applicable'."""

    purpose: str
    round: Optional[int] = None
    step: Optional[int] = None
    edge: Optional[int] = None
    device: Optional[int] = None


def _purpose_code(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "little")


def _coordinate(value: Optional[int]) -> int:
    # Shift by one so that None and 0 never collide.
    if value is None:
        return 0
    if value < 0:
        raise ValueError(f"stream coordinates must be non-negative, got {value}")
    return int(value) + 1


def fork_rng(master_seed: int, label: StreamLabel) -> np.random.Generator:
    """Deterministic, label-separated generator derived from the master seed."""
    if not isinstance(label, StreamLabel):
        label = StreamLabel(*label)
    spawn_key = (
        _purpose_code(label.purpose),
        _coordinate(label.round),
        _coordinate(label.step),
        _coordinate(label.edge),
        _coordinate(label.device),
    )
    seq = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(seq))

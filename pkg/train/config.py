"""
Run configuration: TOML files validated into pydantic models.

Environment (read through python-dotenv, so a local .env works too):
    ARSAM_OUTPUT_DIR      base directory for relative output paths (default: artifacts)
    MLFLOW_TRACKING_URI   tracking server or sqlite URI for mlflow
    ARSAM_LOG_LEVEL       default log level for the CLI
"""
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Annotated, Iterable, List, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from arsam.exceptions import ConfigError
from arsam.optimizers import OptimizerConfig
from arsam.scheduler import ScheduleConfig

logger = logging.getLogger(__name__)

load_dotenv()

DEFAULT_OUTPUT_DIR = "artifacts"


def output_dir() -> Path:
    return Path(os.getenv("ARSAM_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))


def default_log_level() -> str:
    return os.getenv("ARSAM_LOG_LEVEL", "INFO").upper()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class QuadraticObjective(_Section):
    kind: Literal["quadratic"] = "quadratic"
    eigenvalues: List[float] = [1.0, 4.0]
    rotation_seed: Optional[int] = None
    init: Optional[List[float]] = None


class TwoWellObjective(_Section):
    kind: Literal["two_well"] = "two_well"
    sharp_depth: float = 1.0
    sharp_width: float = 0.1
    flat_depth: float = 0.9
    flat_width: float = 1.0
    sharp_center: float = -2.0
    flat_center: float = 2.0
    init: Optional[List[float]] = None


class LogisticObjective(_Section):
    kind: Literal["logistic"] = "logistic"
    l2_lambda: float = Field(default=0.0, ge=0)


class MLPObjective(_Section):
    kind: Literal["mlp"] = "mlp"
    hidden: List[int] = [32, 32]
    activation: Literal["relu", "tanh"] = "relu"
    init_scale_rule: str = "fan_in_uniform"
    workers: int = Field(default=1, ge=1)


ObjectiveConfig = Annotated[
    Union[QuadraticObjective, TwoWellObjective, LogisticObjective, MLPObjective],
    Field(discriminator="kind"),
]


class DataConfig(_Section):
    """Two-moons generation and split. Ignored by analytic objectives."""
    n: int = Field(default=1000, ge=2)
    noise_std: float = Field(default=0.2, ge=0)
    test_fraction: float = Field(default=0.2, gt=0, lt=1)
    label_noise: float = Field(default=0.0, ge=0, le=1)
    seed: Optional[int] = None
    csv_path: Optional[str] = None


class TelemetryConfig(_Section):
    telemetry_path: str = "telemetry.csv"
    summary_path: str = "summary.json"
    checkpoint_path: str = "checkpoint.bin"
    metrics_path: Optional[str] = None
    data_dir: Optional[str] = None
    clock: Literal["wall", "logical"] = "wall"
    queue_size: int = Field(default=1024, ge=1)

    def resolve(self, name: str) -> Optional[Path]:
        value = getattr(self, name)
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else output_dir() / path


class TrackingConfig(_Section):
    enabled: bool = False
    experiment_name: str = "arsam"
    run_name: Optional[str] = None
    tracking_uri: Optional[str] = None


class RunConfig(_Section):
    """Everything a run depends on. Equal configs give equal telemetry
    when the telemetry clock is logical."""
    seed: int = 0
    iterations: Optional[int] = Field(default=1000, ge=1)
    epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=64, ge=1)
    objective: ObjectiveConfig = Field(default_factory=MLPObjective)
    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    telemetry: TelemetryConfig = Field(default_factory=TelemetryConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    @property
    def uses_dataset(self) -> bool:
        return self.objective.kind in ("logistic", "mlp")

    def total_iterations(self, n_train: int = 1) -> int:
        """Iteration budget; ``epochs`` takes precedence for dataset objectives."""
        if self.epochs is not None and self.uses_dataset:
            return self.epochs * math.ceil(n_train / self.batch_size)
        return self.iterations or 1

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} descends into a non-table value")
        node[keys[-1]] = _parse_value(raw.strip())
    return data


def build_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run config:\n{e}") from e


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a TOML run config (or start from defaults) and apply overrides."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    config = build_config(apply_overrides(data, overrides))
    logger.debug("Loaded config from %s", path or "defaults")
    return config


def flatten(data: dict, prefix: str = "") -> dict:
    """Dotted keys for a nested mapping, as mlflow params want them."""
    flat = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat

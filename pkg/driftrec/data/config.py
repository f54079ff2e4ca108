"""
RUN CONFIGURATION
Flat ``key = value`` files with typed defaults for every hyperparameter

Grammar:
    line    := blank | comment | entry
    comment := '#' anything
    entry   := key WS* '=' WS* value [WS* comment]
Booleans accept true/false/yes/no/1/0; ``split_ratios`` is a comma list.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from driftrec.core.numerics import OptimizerKind, OptimizerSettings
from driftrec.errors import ConfigError

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86_400.0
SECONDS_PER_WEEK = 7 * SECONDS_PER_DAY


class DatasetFormat(Enum):
    MOVIELENS_DAT = "movielens-dat"
    TSV = "tsv"


class SplitMode(Enum):
    COUNT = "count"
    TIME = "time"


class DecaySign(Enum):
    NEGATIVE = "negative"   # h·e^{−Δτ/λ}
    POSITIVE = "positive"   # h·e^{+Δτ/λ}, as printed in the source formula


@dataclass
class RunConfig:
    """Every knob of a train / stream-evaluate run"""
    # Dataset
    dataset_path: str = ""
    dataset_format: DatasetFormat = DatasetFormat.MOVIELENS_DAT
    rating_min: float = 0.0
    rating_max: float = 10.0
    granularity_weeks: float = 2.0
    split_ratios: Tuple[float, float, float] = (4.0, 1.0, 5.0)
    split_mode: SplitMode = SplitMode.COUNT

    # Model widths
    stationary_dim: int = 20
    dynamic_dim: int = 20
    hidden_dim: int = 20
    embedding_dim: int = 32
    mlp_width: int = 64

    # Priors and decay
    decay_user_weeks: float = 1.0
    decay_item_weeks: float = 4.0
    decay_sign: DecaySign = DecaySign.NEGATIVE
    sigma_user: float = 1.0
    sigma_item: float = 1.0

    # Optimisation
    learning_rate: float = 1e-3
    optimizer: OptimizerKind = OptimizerKind.ADAM
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    epochs: int = 5
    truncation_weeks: float = 20.0
    train_iterations: int = 5
    test_iterations: int = 3
    update_interval_steps: int = 1
    seed: int = 0

    # Switches
    stop_prior_grad: bool = False
    dynamics_off: bool = False
    record_factors: bool = False

    # Synthetic stream generator
    synth_users: int = 200
    synth_items: int = 100
    synth_steps: int = 5
    synth_ratings_per_step: int = 2000
    synth_global_mean: float = 5.0
    synth_factor_scale: float = 0.3
    synth_noise: float = 0.25
    synth_variance_scale: float = 1.0

    @property
    def granularity_seconds(self) -> float:
        return self.granularity_weeks * SECONDS_PER_WEEK

    @property
    def truncation_steps(self) -> int:
        return max(1, int(round(self.truncation_weeks / self.granularity_weeks)))

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            kind=self.optimizer,
            learning_rate=self.learning_rate,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            epsilon=self.adam_epsilon,
        )

    def validate(self) -> "RunConfig":
        positive = [
            "granularity_weeks", "stationary_dim", "dynamic_dim", "hidden_dim", "embedding_dim",
            "mlp_width", "decay_user_weeks", "decay_item_weeks", "sigma_user", "sigma_item",
            "learning_rate", "adam_epsilon", "truncation_weeks", "update_interval_steps",
            "synth_users", "synth_items", "synth_steps", "synth_ratings_per_step",
            "synth_factor_scale", "synth_noise", "synth_variance_scale",
        ]
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"must be positive, got {getattr(self, key)!r}", key=key)
        non_negative = ["epochs", "train_iterations", "test_iterations", "seed"]
        for key in non_negative:
            if getattr(self, key) < 0:
                raise ConfigError(f"must be non-negative, got {getattr(self, key)!r}", key=key)
        if any(r < 0 for r in self.split_ratios) or sum(self.split_ratios) <= 0:
            raise ConfigError("ratios must be non-negative with a positive total", key="split_ratios")
        if self.rating_min >= self.rating_max:
            raise ConfigError("rating_min must be below rating_max", key="rating_min")
        if self.dynamic_dim != self.stationary_dim:
            raise ConfigError("dynamic mean width must equal stationary_dim", key="dynamic_dim")
        for key in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError("must lie in [0, 1)", key=key)
        return self

    def to_text(self) -> str:
        lines = ["# driftrec run configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        """Apply ``key=value`` strings (CLI ``--set``)"""
        updates = {}
        for text in overrides:
            if "=" not in text:
                raise ConfigError(f"override '{text}' is not key=value")
            key, value = (part.strip() for part in text.split("=", 1))
            updates[key] = _parse_value(key, value, None)
        return replace(self, **updates).validate()


_FIELD_TYPES: Dict[str, Any] = {f.name: f.type for f in fields(RunConfig)}
_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _format_value(value: Any) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, line: Optional[int]) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigError("unknown key", key=key, line=line)
    kind = _FIELD_TYPES[key]
    try:
        if isinstance(kind, type) and issubclass(kind, Enum):
            return kind(raw)
        if kind is bool:
            lowered = raw.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        parts = [p.strip() for p in raw.replace(":", ",").split(",") if p.strip()]
        if len(parts) != 3:
            raise ValueError(raw)
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value '{raw}'", key=key, line=line) from exc


def parse_config_text(text: str) -> RunConfig:
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got '{stripped}'", line=number)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        values[key] = _parse_value(key, raw, number)
    return RunConfig(**values).validate()


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read a run configuration; ``None`` yields the documented defaults"""
    if path is None:
        return RunConfig().validate()
    config = parse_config_text(Path(path).read_text(encoding="utf-8"))
    logger.info("✅ Configuration loaded from %s", path)
    return config


def save_config(config: RunConfig, path: Union[str, Path]):
    Path(path).write_text(config.to_text(), encoding="utf-8")

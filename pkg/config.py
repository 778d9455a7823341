from __future__ import annotations

import os
from collections.abc import Mapping
from pathlib import Path
from typing import TYPE_CHECKING, Literal, cast

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PositiveInt,
    field_validator,
    model_validator,
)

if TYPE_CHECKING:
    from engine.pyramid import ScaleSchedule
    from engine.varnet import ModelConfig

DEFAULT_OUTPUT_DIR = "output"
OUTPUT_ENV_VAR = "FASTVAR_OUT"
CONFIG_ENV_VAR = "FASTVAR_CONFIG"

# Scale sides of the 13-step toy schedule. The tail matches the scale range the
# scale-sensitivity ablation works on.
TOY_SIDES: list[int] = [1, 2, 3, 4, 6, 9, 12, 16, 21, 27, 36, 48, 64]

InterpMode = Literal["nearest", "bilinear"]
ReportFormat = Literal["csv", "json"]


def default_output_dir() -> str:
    """Output directory: ``$FASTVAR_OUT`` when set, else ``output``."""
    return os.getenv(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_DIR


# ---------------------------
# Errors
# ---------------------------


class FastVarError(Exception):
    """Base exception for engine errors."""

    kind = "error"

    def __init__(self, message: str, component: str | None = None):
        self.message = message
        self.component = component
        super().__init__(self._format_message())

    def _format_message(self) -> str:
        if self.component:
            return f"{self.component}: {self.message}"
        return self.message


class ShapeError(FastVarError, ValueError):
    """Dimension or width mismatch between operands."""

    kind = "shape"


class ArgumentError(FastVarError, ValueError):
    """Argument outside the accepted domain (k > T, ratio range, bad index)."""

    kind = "argument"


class CacheStateError(FastVarError, RuntimeError):
    """Layer cache misuse: double write, wrong step, or read before capture."""

    kind = "state"


class MapFormatError(FastVarError, ValueError):
    """Binary map or mask file could not be parsed."""

    kind = "parse"

    def __init__(self, message: str, offset: int, component: str | None = None):
        self.offset = offset
        super().__init__(message, component)

    def _format_message(self) -> str:
        return f"{super()._format_message()} (at byte offset {self.offset})"


class ConfigValidationError(Exception):
    """Exception raised when configuration validation fails."""

    def __init__(self, message: str, config_errors: list[str] | None = None):
        self.message = message
        self.config_errors = config_errors or []
        super().__init__(message)

    def __str__(self) -> str:
        if self.config_errors:
            return f"{self.message}; errors: {', '.join(self.config_errors)}"
        return self.message


# ---------------------------
# Config sections
# ---------------------------


class BaseConfigModel(BaseModel):
    model_config = ConfigDict(validate_default=True, frozen=False, extra="forbid")


class ModelSection(BaseConfigModel):
    depth: PositiveInt = 2
    d: PositiveInt = 32
    heads: PositiveInt = 4
    d_ff: PositiveInt = 64
    vocab: PositiveInt = 64
    temperature: float = Field(1.0, ge=0)

    @model_validator(mode="after")
    def _check_heads(self) -> ModelSection:
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        return self


class ScheduleSection(BaseConfigModel):
    sides: list[PositiveInt] = Field(default_factory=lambda: list(TOY_SIDES), min_length=2)
    n_prune: PositiveInt = Field(4, description="Length N of the texture-filling stage, 1 <= N < K")
    ratios: list[float] | None = Field(
        None, description="Per-step pruning ratios for the last N steps; None disables pruning"
    )
    cache_step: PositiveInt | None = Field(None, description="Caching step, defaults to K-N")
    mode: InterpMode = "bilinear"
    extend_scales: list[PositiveInt] = Field(default_factory=list)

    @field_validator("ratios")
    @classmethod
    def _validate_ratios(cls, value: list[float] | None) -> list[float] | None:
        if value is None:
            return None
        for ratio in value:
            if not 0.0 <= ratio <= 1.0:
                raise ValueError(f"pruning ratio {ratio} outside [0, 1]")
        return [float(r) for r in value]

    @model_validator(mode="after")
    def _check_lengths(self) -> ScheduleSection:
        if self.ratios is not None and len(self.ratios) != self.n_prune:
            raise ValueError(
                f"ratios has {len(self.ratios)} entries but n_prune={self.n_prune}"
            )
        return self


class SeedSection(BaseConfigModel):
    weights: int = 0
    condition: int = 1
    sampling: int = 2


class OutputSection(BaseConfigModel):
    directory: str = Field(default_factory=default_output_dir)
    formats: list[ReportFormat] = Field(default_factory=lambda: ["csv"])
    masks: bool = True
    spectra: bool = False


class BenchSection(BaseConfigModel):
    repetitions: PositiveInt = 5
    latency_tail: PositiveInt = Field(2, description="Steps counted by the latency-share line")


class LoggingSection(BaseConfigModel):
    level: str = "INFO"
    file: str | None = None
    format: str = "%(asctime)s - %(levelname)s - %(message)s"

    @field_validator("level")
    @classmethod
    def _validate_level(cls, value: str) -> str:
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if value.upper() not in valid_levels:
            raise ValueError(f"logging level must be one of {valid_levels}, got {value}")
        return value.upper()


class RunConfig(BaseConfigModel):
    """Experiment manifest: model, schedule, seeds, outputs and bench settings."""

    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    seeds: SeedSection = Field(default_factory=SeedSection)
    output: OutputSection = Field(default_factory=OutputSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    logging: LoggingSection = Field(default_factory=LoggingSection)

    @model_validator(mode="after")
    def _check_engine_types(self) -> RunConfig:
        # Build the engine-level types once so every ScaleSchedule/ModelConfig
        # rule is enforced at load time.
        from engine.fastvar import make_prune_schedule

        try:
            sched = self.to_schedule()
            if self.pruning_enabled:
                make_prune_schedule(sched, sched.prune_ratios)
            self.to_model_config()
        except FastVarError as exc:
            raise ValueError(exc.message) from exc
        return self

    @property
    def pruning_enabled(self) -> bool:
        return self.schedule.ratios is not None

    @property
    def output_dir(self) -> Path:
        return Path(self.output.directory)

    @property
    def log_file(self) -> str:
        return self.logging.file or str(self.output_dir / "fastvar.log")

    def to_model_config(self) -> ModelConfig:
        from engine.varnet import ModelConfig

        m = self.model
        return ModelConfig(
            depth=m.depth,
            d=m.d,
            heads=m.heads,
            d_ff=m.d_ff,
            vocab=m.vocab,
            seed=self.seeds.weights,
            temperature=m.temperature,
        )

    def to_schedule(self) -> ScaleSchedule:
        from engine.pyramid import ScaleSchedule

        s = self.schedule
        if s.ratios is not None:
            n_prune, ratios = s.n_prune, s.ratios
        else:
            # Pruning disabled: keep the stage split valid for short schedules.
            n_prune = min(s.n_prune, len(s.sides) - 1)
            ratios = [0.0] * n_prune
        sched = ScaleSchedule.from_sides(
            s.sides,
            n_prune=n_prune,
            prune_ratios=ratios,
            cache_step=s.cache_step,
            mode=s.mode,
        )
        if s.extend_scales:
            sched = sched.extended(s.extend_scales)
        return sched


# ---------------------------
# Loading
# ---------------------------


def load_run_config(data: Mapping[str, object] | None = None) -> RunConfig:
    if data is not None:
        return RunConfig.model_validate(dict(data))
    return RunConfig()


def load_run_config_from_file(path: str | Path) -> RunConfig:
    """Load a JSON or YAML manifest and validate it via `RunConfig`.

    JSON is parsed with the YAML loader (JSON is a YAML subset), so both formats
    share one code path. Schema errors from pydantic propagate unwrapped.

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigValidationError: If the file cannot be read or parsed, or is not a mapping
    """
    import yaml

    config_path = Path(path)
    try:
        raw = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"Configuration file not found: {path}")
    except Exception as e:
        raise ConfigValidationError(f"Failed to read config file {path}: {e}")

    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigValidationError(f"Top-level config in {path} must be a mapping/object.")
    return load_run_config(cast(Mapping[str, object], raw))


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, object]) -> RunConfig:
    """Return a re-validated copy of `cfg` with dotted-path overrides applied.

    Keys look like ``"schedule.ratios"``; ``None`` values are ignored so argparse
    defaults can be passed through untouched.
    """
    data = cfg.model_dump()
    errors: list[str] = []
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in data or not isinstance(data[section], dict) or not key:
            errors.append(f"unknown override {dotted}")
            continue
        data[section][key] = value
    if errors:
        raise ConfigValidationError("Invalid overrides", errors)
    return load_run_config(data)


"""Run configuration: flat key=value files, FUSEJEPA_* env vars, CLI overrides."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Literal

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

logger = logging.getLogger(__name__)

RoutingMode = Literal["pruned", "persistent", "rgb-only", "mod-only"]
Objective = Literal["joint-cls", "three-pass"]


class Settings(BaseSettings):
    """Process-wide settings. All FUSEJEPA_* env vars are read automatically."""

    model_config = SettingsConfigDict(env_prefix="FUSEJEPA_", extra="ignore")

    log_level: str = "INFO"


class RunConfig(BaseSettings):
    """Every tunable of a run. Unknown keys are rejected."""

    model_config = SettingsConfigDict(env_prefix="FUSEJEPA_", extra="forbid", validate_assignment=True)

    # Run
    seed: int = 0
    out_dir: Path = Path("runs/default")
    steps: int = Field(1000, ge=0)
    epochs: int = Field(5, ge=1)
    batch_size: int = Field(16, ge=2)
    num_workers: int = Field(0, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    log_every: int = Field(10, ge=1)
    log_wall_time: bool = True
    checkpoint_every: int = Field(200, ge=1)

    # Optimizer
    lr: float = Field(5e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.95, ge=0, lt=1)
    weight_decay: float = Field(0.05, ge=0)
    warmup_frac: float = Field(0.05, ge=0, lt=1)

    # Objective / SIGReg
    objective: Objective = "joint-cls"
    sigreg_lambda: float = Field(0.1, ge=0, le=1)
    num_directions: int = Field(64, ge=1)
    num_knots: int = Field(64, ge=2)
    t_max: float = Field(4.0, gt=0)
    direction_policy: Literal["resample", "fixed"] = "resample"

    # Encoder
    image_size: int = Field(64, ge=1)
    local_size: int = Field(32, ge=1)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=1)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: int = Field(4, ge=1)
    proj_dim: int = Field(16, ge=1)
    routing_mode: RoutingMode = "pruned"

    # Views
    n_global: int = Field(2, ge=1)
    n_local: int = Field(4, ge=0)
    global_scale_min: float = Field(0.4, gt=0, le=1)
    global_scale_max: float = Field(1.0, gt=0, le=1)
    local_scale_min: float = Field(0.05, gt=0, le=1)
    local_scale_max: float = Field(0.4, gt=0, le=1)
    photometric: bool = True

    # Synthetic data
    scene_size: int = Field(64, ge=8)
    dataset_size: int = Field(2048, ge=1)
    companion: Literal["depth", "thermal"] = "depth"
    r_max: float = Field(80.0, gt=0)
    return_prob: float = Field(0.3, gt=0, le=1)
    cache_dir: Path | None = None

    # Probes
    probe_epochs: int = Field(5, ge=1)
    probe_lr: float = Field(1e-3, gt=0)
    probe_batch_size: int = Field(16, ge=1)
    probe_train_size: int = Field(256, ge=1)
    probe_val_size: int = Field(64, ge=1)
    val_every: int = Field(100, ge=1)

    def total_steps(self) -> int:
        if self.steps > 0:
            return self.steps
        per_epoch = max(1, self.dataset_size // self.batch_size)
        return self.epochs * per_epoch


# ---------------------------------------------------------------------------
# key=value files
# ---------------------------------------------------------------------------


def parse_key_values(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"Line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"Line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_config(values: dict[str, Any]) -> RunConfig:
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}")
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path: Path | str | None = None, **overrides: Any) -> RunConfig:
    """Read a key=value file (if given), then apply non-None ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file {path} not found")
        values.update(parse_key_values(path.read_text()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = build_config(values)
    logger.debug("Loaded config from %s with overrides %s", path, sorted(overrides))
    return cfg


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name in sorted(RunConfig.model_fields):
        value = getattr(cfg, name)
        if value is None:
            continue
        lines.append(f"{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))


# Singleton, importable everywhere
settings = Settings()

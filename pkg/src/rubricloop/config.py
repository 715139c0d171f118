from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple

import yaml
from dotenv import dotenv_values
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    HttpUrl,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError
from .models import EditBudget, ProbabilityMode


class ProviderSettings(BaseSettings):
    """Model endpoint, pricing and concurrency. Credentials come from the environment."""

    model_config = SettingsConfigDict(
        env_prefix="RUBRICLOOP_",
        env_file=None,
        env_nested_delimiter="__",
        extra="ignore",
    )

    kind: Literal["live", "mock", "scenario"] = "live"
    base_url: HttpUrl = "https://api.openai.com/v1"  # type: ignore[assignment]
    api_key: Optional[str] = None
    model: str = "gpt-4o-mini"
    embedding_url: Optional[HttpUrl] = None
    embedding_model: str = "text-embedding-3-small"
    request_timeout: float = 60.0
    max_retries: int = Field(default=3, ge=1)
    backoff_multiplier: float = Field(default=1.0, ge=0.0)
    concurrency: int = Field(default=8, ge=1)
    price_in_per_million: float = Field(default=0.15, ge=0.0)
    price_out_per_million: float = Field(default=0.60, ge=0.0)
    agent_temperature: float = Field(default=0.3, ge=0.0)
    agent_max_tokens: int = 1024
    grade_max_tokens: int = 512
    script_path: Optional[Path] = None
    scenario: Optional[str] = None
    user_agent: str = "rubricloop/0.1.0"

    @model_validator(mode="after")
    def fallback_api_key(self) -> "ProviderSettings":
        if not self.api_key:
            self.api_key = os.environ.get("OPENAI_API_KEY") or None
        return self


class RunConfig(BaseModel):
    """Every knob of one optimization run."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    rounds: int = Field(default=6, ge=0, alias="T")
    beam_size: int = Field(default=4, ge=1, alias="B")
    top_k: int = Field(default=4, ge=1, alias="K")
    diversity_weight: float = Field(default=0.3, ge=0.0, alias="lambda")
    edit_budget: EditBudget = EditBudget.MEDIUM
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    batch_cap: int = Field(default=32, ge=1)
    anchors_m: int = Field(default=8, ge=1)
    neighbors_k: int = Field(default=4, ge=1)
    chunk_size: int = Field(default=8, ge=1)
    ucb_c: float = Field(default=1.0, ge=0.0)
    ucb_budget_factor: float = Field(default=2.0, ge=1.0)
    error_cap: int = Field(default=8, ge=1)
    contrastive_n: int = Field(default=2, ge=1)
    max_rules_words: int = Field(default=2000, ge=50)

    baseline_mode: bool = False
    mode_source: Literal["best", "pooled"] = "best"
    patience: Optional[int] = Field(default=None, ge=1)
    track_validation: bool = False
    run_test: bool = True
    probability_mode: ProbabilityMode = ProbabilityMode.SELF_REPORT

    initial_rubric: Optional[str] = None
    initial_rubric_path: Optional[Path] = None
    scenario: Optional[str] = None
    run_dir: Path = Path("runs/latest")

    provider: ProviderSettings = Field(default_factory=ProviderSettings)

    @field_validator("split_ratios")
    @classmethod
    def ratios_sum_to_one(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(r < 0 for r in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError("split ratios must be non-negative and sum to 1")
        return value

    def rubric_text(self) -> Optional[str]:
        if self.initial_rubric:
            return self.initial_rubric
        if self.initial_rubric_path:
            if not self.initial_rubric_path.exists():
                raise ConfigError(f"Initial rubric not found: {self.initial_rubric_path}")
            return self.initial_rubric_path.read_text(encoding="utf-8")
        return None

    def snapshot(self) -> Dict[str, Any]:
        """YAML-ready dump without credentials."""
        data = self.model_dump(mode="json", by_alias=True)
        data["provider"].pop("api_key", None)
        return data


def _default_data() -> Dict[str, Any]:
    text = resources.files("rubricloop").joinpath("default.yaml").read_text(encoding="utf-8")
    loaded = yaml.safe_load(text) or {}
    return loaded if isinstance(loaded, dict) else {}


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Tuple[str, Any]:
    """``"T=0"`` -> ``("T", 0)``; values are parsed as YAML scalars."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override '{text}' is not of the form key=value")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def _field_name(key: str) -> str:
    for name, info in RunConfig.model_fields.items():
        if key in (name, info.alias):
            return name
    raise ConfigError(f"Unknown config key '{key}'")


def _canonical(data: Mapping[str, Any]) -> Dict[str, Any]:
    """Rename aliases (``T``, ``B``, ``K``, ``lambda``) to field names; later keys win."""
    out: Dict[str, Any] = {}
    for key, value in data.items():
        out[_field_name(key)] = value
    return out


def _apply_override(data: Dict[str, Any], key: str, value: Any) -> None:
    head, _, rest = key.partition(".")
    name = _field_name(head)
    if not rest:
        data[name] = value
    elif name == "provider" and rest in ProviderSettings.model_fields:
        data.setdefault("provider", {})[rest] = value
    else:
        raise ConfigError(f"Unknown config key '{key}'")


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Build a RunConfig.

    Order of precedence: overrides > explicit config_path > packaged default.yaml > defaults.
    Provider keys set through ``RUBRICLOOP_*`` environment variables win over file values.
    """
    data = _default_data()
    if config_path is not None:
        if not config_path.exists():
            raise ConfigError(f"Config file not found: {config_path}")
        with config_path.open("r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"Config file {config_path} must be a mapping")
        data = _merge(data, loaded)
    data = _canonical(data)
    for key, value in (overrides or {}).items():
        _apply_override(data, key, value)

    provider_data = dict(data.pop("provider", None) or {})
    provider_data.pop("api_key", None)
    for name in list(provider_data):
        if f"RUBRICLOOP_{name.upper()}" in os.environ:
            provider_data.pop(name)
    try:
        return RunConfig(**data, provider=ProviderSettings(**provider_data))
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc


def load_settings_with_env(
    config_path: Optional[Path] = None,
    env_file: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Load the run config, optionally merging an explicit .env file first.
    """
    if env_file and env_file.exists():
        env_data = dotenv_values(env_file)
        for key, val in env_data.items():
            if val is not None:
                os.environ[key] = val
    return load_run_config(config_path, overrides)

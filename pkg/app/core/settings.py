import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Literal, Optional

from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigurationError
from app.core.schemas import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings read from the environment and an optional .env file"""
    model_config = SettingsConfigDict(
        env_prefix="SHUFFLEUNET_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    data_dir: Path = Path("data")
    log_level: str = "INFO"
    log_dir: Path = Path("logs")
    device: Literal["auto", "cpu", "cuda"] = "auto"
    num_threads: Optional[int] = Field(default=None, ge=1)


@lru_cache
def get_settings() -> Settings:
    """Get or create the settings instance"""
    return Settings()


# ============ Run configuration files ============

SECTIONS = {"model": ModelConfig, "train": TrainConfig}


class RunConfig(BaseModel):
    """Model and training configuration of one run"""

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse `section.key = value` lines; `#` starts a comment"""
        raw: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'section.key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            section, _, field = key.partition(".")
            if section not in SECTIONS or not field:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            if field not in SECTIONS[section].model_fields:
                raise ConfigurationError(f"line {lineno}: unknown {section} field {field!r}")
            raw[section][field] = _parse_value(value)
        return cls._build(raw["model"], raw["train"])

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        logger.info(f"Loading run configuration from {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            values = getattr(self, section).model_dump(mode="json")
            for field, value in values.items():
                if isinstance(value, (list, tuple)):
                    value = ", ".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = str(value).lower()
                lines.append(f"{section}.{field} = {value}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a copy with `section.key` overrides applied (None values are ignored)"""
        raw = {section: getattr(self, section).model_dump() for section in SECTIONS}
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, field = key.partition(".")
            if section not in SECTIONS or field not in SECTIONS[section].model_fields:
                raise ConfigurationError(f"unknown override {key!r}")
            raw[section][field] = value
        return self._build(raw["model"], raw["train"])

    @classmethod
    def _build(cls, model: Dict[str, Any], train: Dict[str, Any]) -> "RunConfig":
        try:
            return cls(model=ModelConfig(**model), train=TrainConfig(**train))
        except ValidationError as e:
            raise ConfigurationError(f"invalid configuration: {e}") from e


def model_config_from_text(text: str) -> ModelConfig:
    """Parse the `model.*` lines of a run configuration"""
    lines = [line for line in text.splitlines() if line.strip().startswith("model.")]
    return RunConfig.from_text("\n".join(lines)).model


def model_config_to_text(config: ModelConfig) -> str:
    return "".join(
        line + "\n" for line in RunConfig(model=config).to_text().splitlines() if line.startswith("model.")
    )


def _parse_value(value: str) -> Any:
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value

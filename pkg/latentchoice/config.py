"""Configuration utilities.

Two layers of configuration exist.  Process-level knobs (logging level,
run registry location, enumeration guard, parallelism) come from the
environment through :class:`Settings`; defaults are sensible for local work
and can be overridden with ``LATENTCHOICE_*`` variables.  Everything that
describes a particular estimation run lives in a declarative TOML file that
is read here and validated by :class:`latentchoice.pipeline.RunConfig`.
"""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="LATENTCHOICE_", extra="ignore")

    # Root logger level used by the CLI when --verbose is not given
    log_level: str = Field("WARNING")
    # SQLAlchemy URL of the run registry
    database_url: str = Field("sqlite:///./latentchoice.db")
    # Disable to skip writing runs to the registry
    record_runs: bool = Field(True)
    # Default output directory for CLI artifacts
    output_dir: str = Field("out")
    # Wall-clock times make traces non-reproducible; off by default
    trace_wall_time: bool = Field(False)
    # Largest latent count for which exact enumeration is allowed
    max_enumeration_latents: int = Field(20, ge=1)
    # Worker processes for recovery replications
    n_jobs: int = Field(1, ge=1)


@lru_cache
def get_settings() -> Settings:
    """Return a singleton instance of Settings."""
    return Settings()


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """Parse a TOML run file into a plain dictionary.

    Relative ``[data] path`` entries are resolved against the directory of
    the config file so that a config and its dataset can travel together.

    Raises
    ------
    ConfigError
        If the file does not exist or is not valid TOML.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid config file {path}: {exc}") from exc
    data_section = data.get("data")
    if isinstance(data_section, dict) and data_section.get("path"):
        data_path = Path(data_section["path"])
        if not data_path.is_absolute():
            data_section["path"] = str((path.parent / data_path).resolve())
    return data

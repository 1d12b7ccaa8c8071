"""
Configuration management for textspot.

Handles loading run configuration from various sources (profiles, files,
environment, overrides) with proper validation and defaults.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import ValidationError as PydanticValidationError

from .errors import ConfigurationError, ValidationError
from .models import DetectorConfig, OptimizerConfig, DataConfig, RunConfig

PROFILES = ("toy", "full")
# Per-run keys left out of profiles so environment fallbacks can fill them.
RUN_KEYS = ("seed", "device", "output_dir")

# The full profile spells out every value that differs from the toy defaults.
FULL_PROFILE: Dict[str, Any] = {
    "profile": "full",
    "backbone": {
        "kind": "swin",
        "embed_dim": 96,
        "depths": [2, 2, 6, 2],
        "num_heads": [3, 6, 12, 24],
        "window_size": 7,
        "d_model": 256,
    },
    "detector": DetectorConfig().model_dump(),
    "optimizer": OptimizerConfig().model_dump(),
    "data": DataConfig().model_dump(),
}


class ConfigManager:
    """Manages textspot run configuration from multiple sources."""

    def __init__(self):
        self.env_prefix = "TEXTSPOT_"

    def create_config(
        self,
        profile: str = "toy",
        overrides: Optional[Mapping[str, Any]] = None,
        seed: Optional[int] = None,
        device: Optional[str] = None,
        output_dir: Optional[str] = None,
    ) -> RunConfig:
        """
        Create a RunConfig from a named profile with environment fallbacks.

        Args:
            profile: "toy" (workstation scale) or "full" (documented full-scale defaults)
            overrides: Dotted keys to values, e.g. {"detector.num_proposals": 10}
            seed: Random seed; falls back to TEXTSPOT_SEED
            device: Torch device string; falls back to TEXTSPOT_DEVICE
            output_dir: Run directory root; falls back to TEXTSPOT_OUTPUT_DIR

        Returns:
            Validated RunConfig object

        Raises:
            ConfigurationError: If the profile or an override key is unknown
            ValidationError: If Pydantic validation fails
        """
        data = self.profile_dict(profile)
        return self.build(data, overrides=overrides, seed=seed, device=device, output_dir=output_dir)

    def profile_dict(self, profile: str) -> Dict[str, Any]:
        if profile not in PROFILES:
            raise ConfigurationError(
                f"Unknown profile: {profile}",
                config_key="profile",
                config_value=profile,
                valid_options=list(PROFILES),
            )
        if profile == "full":
            return copy.deepcopy(FULL_PROFILE)
        data = RunConfig().model_dump(mode="json")
        for key in RUN_KEYS:
            data.pop(key)
        return data

    def build(
        self,
        data: Dict[str, Any],
        overrides: Optional[Mapping[str, Any]] = None,
        seed: Optional[int] = None,
        device: Optional[str] = None,
        output_dir: Optional[str] = None,
    ) -> RunConfig:
        """Apply overrides and environment fallbacks to a raw dict and validate it."""
        data = copy.deepcopy(data)
        for key, value in (overrides or {}).items():
            self._set_dotted(data, key, value)

        env_seed = self._get_env_int("SEED")
        if seed is not None:
            data["seed"] = seed
        elif env_seed is not None:
            data.setdefault("seed", env_seed)

        env_device = self._get_env_str("DEVICE")
        if device:
            data["device"] = device
        elif env_device:
            data.setdefault("device", env_device)

        env_output = self._get_env_str("OUTPUT_DIR")
        if output_dir:
            data["output_dir"] = output_dir
        elif env_output:
            data.setdefault("output_dir", env_output)

        data_root = self._get_env_str("DATA_ROOT")
        if data_root:
            section = data.setdefault("data", {})
            if isinstance(section, dict) and not section.get("data_root"):
                section["data_root"] = data_root

        try:
            return RunConfig(**data)
        except PydanticValidationError as e:
            raise ValidationError.from_pydantic(e)
        except TypeError as e:
            raise ConfigurationError(f"Configuration creation failed: {str(e)}")

    @staticmethod
    def _set_dotted(data: Dict[str, Any], key: str, value: Any) -> None:
        parts = key.split(".")
        target = data
        for part in parts[:-1]:
            child = target.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigurationError(
                    f"Cannot override nested key below a scalar: {key}",
                    config_key=key,
                    config_value=value,
                )
            target = child
        target[parts[-1]] = value

    def _get_env_str(self, key: str) -> Optional[str]:
        """Get string value from environment variable."""
        value = os.getenv(f"{self.env_prefix}{key}")
        return value if value else None

    def _get_env_int(self, key: str) -> Optional[int]:
        """Get integer value from environment variable."""
        value = self._get_env_str(key)
        if value is not None:
            try:
                return int(value)
            except ValueError:
                raise ConfigurationError(
                    f"Environment variable {self.env_prefix}{key} must be an integer, got: {value}",
                    config_key=key,
                    config_value=value
                )
        return None

    def data_root(self, config: RunConfig) -> Optional[Path]:
        """Root directory for relative dataset paths."""
        root = config.data.data_root or self._get_env_str("DATA_ROOT")
        return Path(root) if root else None

    def load_from_file(
        self,
        file_path: str,
        overrides: Optional[Mapping[str, Any]] = None,
    ) -> RunConfig:
        """
        Load configuration from JSON or TOML file.

        A file lists only the keys it changes. It starts from the full profile
        when it sets ``profile = "full"``, otherwise from the toy profile.

        Args:
            file_path: Path to configuration file
            overrides: Dotted keys applied after the file

        Returns:
            Validated RunConfig object

        Raises:
            ConfigurationError: If file loading fails
        """
        config_path = Path(file_path)

        if not config_path.exists():
            raise ConfigurationError(
                f"Configuration file not found: {file_path}",
                config_key="config_file",
                config_value=file_path
            )

        try:
            if config_path.suffix.lower() == '.json':
                with open(config_path, 'r', encoding='utf-8') as f:
                    data = json.load(f)
            elif config_path.suffix.lower() in ['.toml', '.tml']:
                try:
                    import tomllib  # Python 3.11+
                except ImportError:
                    try:
                        import tomli as tomllib
                    except ImportError:
                        raise ConfigurationError(
                            "TOML support requires 'tomli' package for Python < 3.11",
                            config_key="config_file",
                            config_value=file_path
                        )

                with open(config_path, 'rb') as f:
                    data = tomllib.load(f)
            else:
                raise ConfigurationError(
                    f"Unsupported configuration file format: {config_path.suffix}",
                    config_key="config_file",
                    config_value=file_path,
                    valid_options=[".json", ".toml"]
                )
        except ConfigurationError:
            raise
        except Exception as e:
            raise ConfigurationError(
                f"Failed to load configuration from {file_path}: {str(e)}",
                config_key="config_file",
                config_value=file_path
            )

        if not isinstance(data, dict):
            raise ConfigurationError(
                f"Configuration file must contain an object: {file_path}",
                config_key="config_file",
                config_value=file_path
            )

        profile = data.get("profile", "toy")
        base = self.profile_dict(profile if profile in PROFILES else "toy")
        merged = _deep_merge(base, data)
        return self.build(merged, overrides=overrides)

    def save_to_file(self, config: RunConfig, file_path: str) -> None:
        """
        Save configuration to JSON file.

        Args:
            config: Configuration to save
            file_path: Path where to save the configuration

        Raises:
            ConfigurationError: If file saving fails
        """
        try:
            config_path = Path(file_path)
            config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(config_path, 'w', encoding='utf-8') as f:
                json.dump(config.model_dump(mode="json"), f, indent=2)
        except Exception as e:
            raise ConfigurationError(
                f"Failed to save configuration to {file_path}: {str(e)}",
                config_key="config_file",
                config_value=file_path
            )


def _deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_overrides(items: List[str]) -> Dict[str, Any]:
    """Parse ``key=value`` strings; values are read as JSON when possible."""
    overrides: Dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(
                f"Override must look like key=value: {item}",
                config_key="override",
                config_value=item
            )
        key, raw = item.split("=", 1)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


# Global config manager instance
config_manager = ConfigManager()

import yaml
import os
from typing import Any, Dict

from core.errors import ConfigError

DEFAULT_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "settings.yaml")


class ConfigLoader:
    def __init__(self, config_path: str = DEFAULT_PATH):
        self.config_path = config_path
        self._config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        if not os.path.exists(self.config_path):
            raise ConfigError(f"Configuration file not found at {self.config_path}")

        with open(self.config_path, 'r', encoding='utf-8') as f:
            try:
                loaded = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"{self.config_path}: invalid YAML ({e})") from e
        if loaded is None:
            return {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{self.config_path}: top level must be a mapping")
        return loaded

    def get(self, key: str, default: Any = None) -> Any:
        """
        Retrieve a configuration value using dot notation (e.g., 'train.batch_size').
        """
        keys = key.split('.')
        value = self._config
        try:
            for k in keys:
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default


# Global instance
config = ConfigLoader()

# proud/deps.py
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from proud.errors import ConfigError
from proud.schemas import ExperimentConfig

# ------------------------------------------------------------------
#  PROUD_* overrides may live in a .env in the project root
# ------------------------------------------------------------------
env_path = Path(__file__).resolve().parents[1] / ".env"
load_dotenv(env_path)


# ------------------------------------------------------------------
#  Flat "key = value" config file -> ExperimentConfig
# ------------------------------------------------------------------
def _nest(flat: Mapping[str, Optional[str]], source: str) -> Dict[str, Any]:
    """generator.num_classes = 4  ->  {"generator": {"num_classes": "4"}}"""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            raise ConfigError(f"{source}: key {key!r} has no value")
        *sections, leaf = key.strip().split(".")
        node = nested
        for section in sections:
            node = node.setdefault(section, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{source}: {key!r} nests under a scalar key")
        node[leaf] = value
    return nested


def build_config(values: Mapping[str, Any], source: str = "<inline>") -> ExperimentConfig:
    try:
        return ExperimentConfig(**values)
    except ValidationError as exc:
        raise ConfigError(f"{source}: invalid configuration\n{exc}") from exc


def load_config(path: Union[str, Path], **overrides: Any) -> ExperimentConfig:
    """Parse a config file; keyword overrides win over file values."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")

    values = _nest(dotenv_values(path), str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})

    dataset_path = values.get("dataset_path")
    if dataset_path and not Path(dataset_path).is_absolute():
        values["dataset_path"] = path.parent / dataset_path

    return build_config(values, source=str(path))

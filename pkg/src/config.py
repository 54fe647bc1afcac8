from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import structlog
import yaml

from .cross_fusion import CfConfig, StageSpec
from .errors import ConfigError
from .validators import schema_errors

logger = structlog.get_logger()

NECK_SCHEMA = "neck-config-schema.json"

DEFAULT_NECK_CONFIG: Dict[str, Any] = {
    "in_channels": [32, 64, 128],
    "in_scales": [1, 2, 4],
    "out_channels": [32, 64, 128],
    "out_scales": [1, 2, 4],
    "n": 1,
    "K": 1,
}


@dataclass
class RunConfig:
    subcommand: str
    seed: int = 0
    input_paths: Dict[str, Optional[Path]] = field(default_factory=dict)
    output_paths: Dict[str, Optional[Path]] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)


def neck_config_from_dict(document: Any, source: str = "<neck config>") -> CfConfig:
    errors = schema_errors(document, NECK_SCHEMA)
    if errors:
        raise ConfigError(f"invalid neck configuration {source}: {'; '.join(errors)}")

    for side in ("in", "out"):
        channels, scales = document[f"{side}_channels"], document[f"{side}_scales"]
        if len(channels) != len(scales):
            raise ConfigError(f"{source}: {side}_channels has {len(channels)} entries but "
                              f"{side}_scales has {len(scales)}")
    try:
        return CfConfig(
            in_stages=tuple(StageSpec(c, s) for c, s in zip(document["in_channels"], document["in_scales"])),
            out_stages=tuple(StageSpec(c, s) for c, s in zip(document["out_channels"], document["out_scales"])),
            n=document.get("n", 1),
            K=document.get("K", 1),
        )
    except ValueError as e:
        raise ConfigError(f"{source}: {e}") from e


def load_neck_config(path: Union[str, Path, None] = None) -> CfConfig:
    """Reads a YAML neck configuration; without a path the default 3-stage layout is used."""
    if path is None:
        return neck_config_from_dict(DEFAULT_NECK_CONFIG, source="<default>")

    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"'{path}' is not valid YAML: {e}") from e

    config = neck_config_from_dict(document, source=f"'{path}'")
    logger.info("Neck configuration loaded", path=str(path), n=config.n, K=config.K,
                in_stages=len(config.in_stages), out_stages=len(config.out_stages))
    return config

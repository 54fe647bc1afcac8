from pathlib import Path
from typing import Any, Dict, Union

import structlog
import yaml

from .activations import Activation
from .errors import ConfigError
from .scr_net import ScrModel
from .tensor_core import ConvLayer
from .tensor_io import load_tensor, save_tensor

logger = structlog.get_logger()

METADATA_FILE = "metadata.yaml"
FORMAT_VERSION = 1


def _weight_path(directory: Path, index: int) -> Path:
    return directory / f"layer{index}.weight.snft"


def _bias_path(directory: Path, index: int) -> Path:
    return directory / f"layer{index}.bias.snft"


def save_checkpoint(model: ScrModel, directory: Union[str, Path]) -> Path:
    """Writes one tensor file per weight and bias plus a YAML metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    for index, layer in enumerate(model.layers):
        save_tensor(layer.weights, _weight_path(directory, index))
        if layer.bias is not None:
            save_tensor(layer.bias, _bias_path(directory, index))
        else:
            _bias_path(directory, index).unlink(missing_ok=True)

    metadata: Dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture,
        "kernel_size": model.layers[0].kernel_size,
        "bias": model.has_bias,
        "activations": [str(activation) for activation in model.activations],
        "selected_channel": model.selected_channel,
        "binarize_threshold": float(model.binarize_threshold),
        "seed": model.seed,
    }
    with open(directory / METADATA_FILE, "w", encoding="utf-8") as f:
        yaml.safe_dump(metadata, f, sort_keys=False)

    logger.info("Checkpoint saved", directory=str(directory), architecture=model.architecture,
                selected_channel=model.selected_channel)
    return directory


def load_checkpoint(directory: Union[str, Path]) -> ScrModel:
    directory = Path(directory)
    metadata_path = directory / METADATA_FILE
    if not metadata_path.exists():
        raise ConfigError(f"'{directory}' is not a checkpoint: {METADATA_FILE} is missing")
    with open(metadata_path, "r", encoding="utf-8") as f:
        metadata = yaml.safe_load(f) or {}

    if metadata.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {metadata.get('format_version')}")
    try:
        widths = [int(w) for w in str(metadata["architecture"]).split("-")]
        activations = [Activation.parse(a) for a in metadata["activations"]]
        has_bias = bool(metadata["bias"])
    except (KeyError, ValueError) as e:
        raise ConfigError(f"malformed checkpoint metadata in '{metadata_path}': {e}") from e

    layers = []
    for index in range(len(widths) - 1):
        weights = load_tensor(_weight_path(directory, index))
        bias = load_tensor(_bias_path(directory, index)) if has_bias else None
        expected = (widths[index + 1], widths[index])
        if weights.shape[:2] != expected:
            raise ConfigError(f"layer {index} weights have shape {weights.shape}, metadata implies {expected}")
        layers.append(ConvLayer(weights=weights, bias=bias, stride=1, padding=weights.shape[2] // 2))

    model = ScrModel(
        layers=layers,
        activations=activations,
        selected_channel=metadata.get("selected_channel"),
        binarize_threshold=float(metadata.get("binarize_threshold", 0.5)),
        seed=metadata.get("seed"),
    )
    logger.info("Checkpoint loaded", directory=str(directory), architecture=model.architecture)
    return model

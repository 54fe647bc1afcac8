import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List

import jsonschema
import structlog

if TYPE_CHECKING:
    from .config import RunConfig

logger = structlog.get_logger()

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schema"


@dataclass
class ValidationResult:
    is_valid: bool
    errors: List[str]
    warnings: List[str]


@lru_cache(maxsize=None)
def load_schema(name: str) -> Dict[str, Any]:
    with open(SCHEMA_DIR / name, "r", encoding="utf-8") as f:
        return json.load(f)


def schema_errors(document: Any, schema_name: str) -> List[str]:
    """Every violation of the named schema, as 'location: message' strings."""
    validator = jsonschema.Draft7Validator(load_schema(schema_name))
    errors = []
    for error in sorted(validator.iter_errors(document), key=lambda e: [str(part) for part in e.absolute_path]):
        location = "/".join(str(part) for part in error.absolute_path) or "<root>"
        errors.append(f"{location}: {error.message}")
    return errors


class RunConfigValidator:
    # numeric options and their inclusive bounds; None leaves a side open
    NUMERIC_BOUNDS = {
        "seed": (0, None),
        "epochs": (0, None),
        "steps": (0, None),
        "lr": (0.0, None),
        "jobs": (1, None),
        "threshold": (0.0, 1.0),
        "samples": (2, None),
        "channel": (0, 31),
    }

    def __init__(self) -> None:
        self.logger = logger.bind(component="validator")

    def validate(self, config: "RunConfig") -> ValidationResult:
        errors: List[str] = []
        warnings: List[str] = []

        self.logger.info("Validating run configuration", subcommand=config.subcommand)

        for name, path in config.input_paths.items():
            errors.extend(self._validate_input_path(name, path))

        for name, path in config.output_paths.items():
            errors.extend(self._validate_output_path(name, path))

        for name, value in config.options.items():
            if name in self.NUMERIC_BOUNDS and value is not None:
                low, high = self.NUMERIC_BOUNDS[name]
                errors.extend(self._validate_numeric_field(name, value, low, high))

        if config.options.get("thresholds") is not None:
            errors.extend(self._validate_thresholds(config.options["thresholds"]))

        if config.options.get("x_range") is not None:
            x_min, x_max = config.options["x_range"]
            if x_max < x_min:
                errors.append(f"x range is reversed: {x_min} > {x_max}")

        warnings.extend(self._training_warnings(config.options))

        result = ValidationResult(is_valid=len(errors) == 0, errors=errors, warnings=warnings)

        if result.is_valid:
            self.logger.info("Run configuration valid", warnings=len(warnings))
        else:
            self.logger.error("Run configuration invalid", errors=len(errors))

        return result

    def _validate_input_path(self, name: str, path: Path) -> List[str]:
        if path is None:
            return []
        if not Path(path).exists():
            return [f"{name} '{path}' does not exist"]
        return []

    def _validate_output_path(self, name: str, path: Path) -> List[str]:
        if path is None:
            return []
        path = Path(path)
        if path.exists() and path.is_dir() != self._expects_directory(name):
            kind = "a directory" if self._expects_directory(name) else "a file"
            return [f"{name} '{path}' exists and is not {kind}"]
        for parent in path.parents:
            if parent.exists():
                if not parent.is_dir():
                    return [f"{name} '{path}' cannot be created under the file '{parent}'"]
                break
        return []

    @staticmethod
    def _expects_directory(name: str) -> bool:
        return name.endswith("dir") or name == "checkpoint"

    def _validate_numeric_field(self, field: str, value: Any, min_val: Any, max_val: Any) -> List[str]:
        errors = []

        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return [f"{field} must be a number"]
        if min_val is not None and value < min_val:
            errors.append(f"{field} must be at least {min_val}, got {value}")
        if max_val is not None and value > max_val:
            errors.append(f"{field} must be at most {max_val}, got {value}")

        return errors

    def _validate_thresholds(self, thresholds: List[float]) -> List[str]:
        if len(thresholds) != 3:
            return [f"exactly three grading thresholds are needed, got {len(thresholds)}"]
        errors = []
        if not all(0.0 < t < 1.0 for t in thresholds):
            errors.append(f"grading thresholds must lie in (0, 1), got {thresholds}")
        if not thresholds[0] < thresholds[1] < thresholds[2]:
            errors.append(f"grading thresholds must be strictly increasing, got {thresholds}")
        return errors

    def _training_warnings(self, options: Dict[str, Any]) -> List[str]:
        warnings = []

        lr = options.get("lr")
        if lr is not None and lr > 1.0:
            warnings.append(f"learning rate {lr} is unusually large and may diverge")
        if lr == 0.0:
            warnings.append("learning rate 0 leaves the weights unchanged")

        epochs = options.get("epochs")
        if epochs is not None and epochs > 10000:
            warnings.append(f"{epochs} epochs will take a long time on one CPU core")

        return warnings

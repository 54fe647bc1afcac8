from typing import Any, List, Optional, Sequence


class SnowfuseError(Exception):
    """Base class for every error raised deliberately by snowfuse."""


class ShapeError(SnowfuseError, ValueError):
    pass


class ResizeError(ShapeError):
    pass


class GradientCheckError(SnowfuseError):
    pass


class ParseError(SnowfuseError):
    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None,
                 line: Optional[int] = None):
        location = []
        if path:
            location.append(str(path))
        if line is not None:
            location.append(f"line {line}")
        if offset is not None:
            location.append(f"byte {offset}")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")
        self.path = path
        self.offset = offset
        self.line = line


class DatasetValidationError(SnowfuseError):
    def __init__(self, message: str, offenders: Sequence[Any]):
        super().__init__(f"{message}: {', '.join(str(o) for o in offenders)}")
        self.offenders: List[Any] = list(offenders)


class TrainingDivergedError(SnowfuseError):
    def __init__(self, message: str, step: int, log: Any = None):
        super().__init__(f"{message} (step {step})")
        self.step = step
        self.log = log


class ChannelSelectionError(SnowfuseError):
    pass


class GraphError(SnowfuseError):
    pass


class ConfigError(SnowfuseError):
    pass

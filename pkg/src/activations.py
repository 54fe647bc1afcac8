"""Peak Act and the reference activations it is compared against.

Peak Act is piecewise:

    f(x) = 0.2 x          x < 0
           x^2            0 <= x < 1
           (x - 2)^2      1 <= x < 2
           -0.2 (x - 2)   x >= 2

It peaks at f(1) = 1. At the kinks 0, 1 and 2 the derivative takes the
right-limit value, so f'(0) = 0, f'(1) = -2 and f'(2) = -0.2.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .tensor_core import Tensor, record, register_kinks
from .utils import write_csv

logger = structlog.get_logger()

PEAK_ACT_KINKS = (0.0, 1.0, 2.0)
TAIL_SLOPE = 0.2


def peak_act_values(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.select(
        [x < 0, x < 1, x < 2],
        [TAIL_SLOPE * x, x * x, (x - 2) ** 2],
        default=-TAIL_SLOPE * (x - 2),
    )


def peak_act_derivative(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.select(
        [x < 0, x < 1, x < 2],
        [np.full_like(x, TAIL_SLOPE), 2 * x, 2 * (x - 2)],
        default=np.full_like(x, -TAIL_SLOPE),
    )


def peak_act_grad(x: float) -> float:
    return float(peak_act_derivative(np.float64(x)))


def peak_act(x: Tensor) -> Tensor:
    register_kinks(x.data, PEAK_ACT_KINKS)
    slope = peak_act_derivative(x.data)
    result = Tensor(peak_act_values(x.data))
    record("peak_act", [x], result, lambda grad: [grad * slope])
    return result


class ActivationKind(str, Enum):
    PEAK_ACT = "peak-act"
    SIGMOID = "sigmoid"
    RELU = "relu"
    LEAKY_RELU = "leaky-relu"


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind
    slope: Optional[float] = None

    def __post_init__(self) -> None:
        if self.kind is ActivationKind.LEAKY_RELU:
            if self.slope is None or not 0.0 < self.slope < 1.0:
                raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {self.slope}")
        elif self.slope is not None:
            raise ValueError(f"{self.kind.value} takes no slope")

    @classmethod
    def parse(cls, text: str) -> "Activation":
        """Accepts 'peak-act', 'sigmoid', 'relu' or 'leaky-relu[:slope]' (slope defaults to 0.1)."""
        name, _, slope = text.strip().lower().partition(":")
        kind = ActivationKind(name)
        if kind is ActivationKind.LEAKY_RELU:
            return cls(kind, float(slope) if slope else 0.1)
        if slope:
            raise ValueError(f"{kind.value} takes no slope, got '{text}'")
        return cls(kind)

    def __str__(self) -> str:
        if self.kind is ActivationKind.LEAKY_RELU:
            return f"{self.kind.value}:{self.slope:g}"
        return self.kind.value

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind is ActivationKind.PEAK_ACT:
            return peak_act_values(x)
        if self.kind is ActivationKind.SIGMOID:
            return 0.5 * (1.0 + np.tanh(0.5 * x))
        if self.kind is ActivationKind.RELU:
            return np.where(x >= 0, x, 0.0)
        return np.where(x >= 0, x, self.slope * x)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind is ActivationKind.PEAK_ACT:
            return peak_act_derivative(x)
        if self.kind is ActivationKind.SIGMOID:
            s = self.values(x)
            return s * (1.0 - s)
        if self.kind is ActivationKind.RELU:
            return np.where(x >= 0, 1.0, 0.0)
        return np.where(x >= 0, 1.0, self.slope)

    def kinks(self) -> Tuple[float, ...]:
        if self.kind is ActivationKind.PEAK_ACT:
            return PEAK_ACT_KINKS
        if self.kind is ActivationKind.SIGMOID:
            return ()
        return (0.0,)

    def __call__(self, x: Tensor) -> Tensor:
        return apply_activation(self, x)


PEAK_ACT = Activation(ActivationKind.PEAK_ACT)
SIGMOID = Activation(ActivationKind.SIGMOID)
RELU = Activation(ActivationKind.RELU)


def apply_activation(activation: Activation, x: Tensor) -> Tensor:
    if activation.kind is ActivationKind.PEAK_ACT:
        return peak_act(x)
    kinks = activation.kinks()
    if kinks:
        register_kinks(x.data, kinks)
    slope = activation.derivative(x.data)
    result = Tensor(activation.values(x.data))
    record(activation.kind.value, [x], result, lambda grad: [grad * slope])
    return result


def reference_activation(kind: Union[Activation, ActivationKind, str], x: Tensor) -> Tensor:
    if isinstance(kind, str) and not isinstance(kind, ActivationKind):
        kind = Activation.parse(kind)
    elif isinstance(kind, ActivationKind):
        kind = Activation(kind, 0.1 if kind is ActivationKind.LEAKY_RELU else None)
    return apply_activation(kind, x)


def dump_activation_samples(kind: Union[Activation, str], x_min: float, x_max: float,
                            n: int) -> List[Tuple[float, float, float]]:
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if x_max < x_min:
        raise ValueError(f"x_max {x_max} is below x_min {x_min}")
    activation = Activation.parse(kind) if isinstance(kind, str) else kind
    xs = np.linspace(x_min, x_max, n)
    fs = activation.values(xs)
    grads = activation.derivative(xs)
    return [(float(x), float(f), float(g)) for x, f, g in zip(xs, fs, grads)]


def write_activation_csv(rows: Sequence[Tuple[float, float, float]], path: Union[str, Path]) -> None:
    write_csv(Path(path), ["x", "f", "grad"], rows)
    logger.info("Activation samples written", path=str(path), rows=len(rows))

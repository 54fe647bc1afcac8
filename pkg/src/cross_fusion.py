"""Cross Fusion layer: every input scale feeds every output scale in one step.

For each output branch t

    Y_t = sum_s Conv_{s,t}(Resize_{s->t}(X_s))
    O_t = CSP(PReLU(BN(Y_t)))

with an independent conv per (input, output) pair. Stage resolutions are
expressed as downsampling factors relative to the shallowest stage.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from .errors import ShapeError
from .tensor_core import (
    ConvLayer,
    RunningStats,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    elementwise_add,
    prelu,
    resize_to,
)

logger = structlog.get_logger()

PRELU_INIT = 0.25


@dataclass(frozen=True)
class StageSpec:
    channels: int
    scale: int

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError(f"stage channels must be positive, got {self.channels}")
        if self.scale < 1 or self.scale & (self.scale - 1):
            raise ValueError(f"stage scale must be a power of two, got {self.scale}")


def _check_increasing(stages: Sequence[StageSpec], label: str) -> None:
    if not stages:
        raise ValueError(f"{label} must hold at least one stage")
    scales = [stage.scale for stage in stages]
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"{label} scales must be strictly increasing, got {scales}")


@dataclass(frozen=True)
class CfConfig:
    in_stages: Tuple[StageSpec, ...]
    out_stages: Tuple[StageSpec, ...]
    n: int = 1
    K: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "in_stages", tuple(self.in_stages))
        object.__setattr__(self, "out_stages", tuple(self.out_stages))
        _check_increasing(self.in_stages, "in_stages")
        _check_increasing(self.out_stages, "out_stages")
        if self.n < 1:
            raise ValueError(f"n must be at least 1, got {self.n}")
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"K must be a positive odd integer, got {self.K}")

    def layer_stages(self, index: int) -> Tuple[Tuple[StageSpec, ...], Tuple[StageSpec, ...]]:
        """The first layer maps in_stages to out_stages; later layers map out_stages to themselves."""
        return (self.in_stages if index == 0 else self.out_stages), self.out_stages

    def with_kernel(self, K: int) -> "CfConfig":
        return CfConfig(self.in_stages, self.out_stages, self.n, K)


@dataclass
class ParamCount:
    conv_weights: int = 0
    biases: int = 0
    bn: int = 0
    prelu: int = 0

    @property
    def total(self) -> int:
        return self.conv_weights + self.biases + self.bn + self.prelu

    def __add__(self, other: "ParamCount") -> "ParamCount":
        return ParamCount(
            self.conv_weights + other.conv_weights,
            self.biases + other.biases,
            self.bn + other.bn,
            self.prelu + other.prelu,
        )

    def as_dict(self) -> Dict[str, int]:
        return {
            "conv_weights": self.conv_weights,
            "biases": self.biases,
            "bn": self.bn,
            "prelu": self.prelu,
            "total": self.total,
        }


def conv_param_count(layer: ConvLayer) -> ParamCount:
    return ParamCount(conv_weights=layer.weights.size, biases=0 if layer.bias is None else layer.bias.size)


def _zero_bias_conv(rng: np.random.Generator, c_in: int, c_out: int, k: int) -> ConvLayer:
    layer = ConvLayer.create(rng, c_in, c_out, k, bias=False)
    return ConvLayer(weights=layer.weights, bias=Tensor.zeros((c_out,)), padding=k // 2)


def stage_sizes(inputs: Sequence[Tensor], stages: Sequence[StageSpec]) -> Tuple[int, int]:
    """Checks inputs against their stages and returns the full (scale 1) resolution."""
    if len(inputs) != len(stages):
        raise ShapeError(f"expected {len(stages)} input stages, got {len(inputs)}")
    base: Optional[Tuple[int, int]] = None
    for index, (x, stage) in enumerate(zip(inputs, stages)):
        if x.data.ndim != 4:
            raise ShapeError(f"input stage {index} must be N x C x H x W, got {x.shape}")
        if x.shape[1] != stage.channels:
            raise ShapeError(f"input stage {index} has {x.shape[1]} channels, expected {stage.channels}")
        full = (x.shape[2] * stage.scale, x.shape[3] * stage.scale)
        if base is None:
            base = full
        elif full != base:
            raise ShapeError(
                f"input stage {index} ({x.shape[2]}x{x.shape[3]}) does not sit at scale {stage.scale} "
                f"of a {base[0]}x{base[1]} base resolution"
            )
    assert base is not None
    return base


def _branch_size(base: Tuple[int, int], stage: StageSpec) -> Tuple[int, int]:
    if base[0] % stage.scale or base[1] % stage.scale:
        raise ShapeError(f"base resolution {base[0]}x{base[1]} is not divisible by output scale {stage.scale}")
    return base[0] // stage.scale, base[1] // stage.scale


@dataclass
class GOctConvWeights:
    in_stages: Tuple[StageSpec, ...]
    out_stages: Tuple[StageSpec, ...]
    convs: Dict[Tuple[int, int], ConvLayer]

    @classmethod
    def create(cls, rng: np.random.Generator, in_stages: Sequence[StageSpec], out_stages: Sequence[StageSpec],
               K: int) -> "GOctConvWeights":
        convs = {
            (s, t): ConvLayer.create(rng, src.channels, dst.channels, K, padding=K // 2)
            for t, dst in enumerate(out_stages)
            for s, src in enumerate(in_stages)
        }
        return cls(tuple(in_stages), tuple(out_stages), convs)

    def parameters(self) -> List[Tensor]:
        return [p for key in sorted(self.convs) for p in self.convs[key].parameters()]

    def param_count(self) -> ParamCount:
        return sum((conv_param_count(conv) for conv in self.convs.values()), ParamCount())


def goctconv(inputs: Sequence[Tensor], config: CfConfig, weights: GOctConvWeights) -> List[Tensor]:
    for conv in weights.convs.values():
        if conv.kernel_size != config.K:
            raise ShapeError(f"gOctConv weights use K={conv.kernel_size} but the config says K={config.K}")
    base = stage_sizes(inputs, weights.in_stages)

    outputs = []
    for t, stage in enumerate(weights.out_stages):
        height, width = _branch_size(base, stage)
        total: Optional[Tensor] = None
        for s, x in enumerate(inputs):
            contribution = conv2d(resize_to(x, height, width), weights.convs[(s, t)])
            total = contribution if total is None else elementwise_add(total, contribution)
        assert total is not None
        outputs.append(total)
    return outputs


@dataclass
class CspWeights:
    split_a: ConvLayer
    split_b: ConvLayer
    bottleneck_reduce: ConvLayer
    bottleneck_conv: ConvLayer
    fuse: ConvLayer

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int) -> "CspWeights":
        if channels % 2:
            raise ShapeError(f"CSP needs an even channel count, got {channels}")
        half = channels // 2
        return cls(
            split_a=_zero_bias_conv(rng, channels, half, 1),
            split_b=_zero_bias_conv(rng, channels, half, 1),
            bottleneck_reduce=_zero_bias_conv(rng, half, half, 1),
            bottleneck_conv=_zero_bias_conv(rng, half, half, 3),
            fuse=_zero_bias_conv(rng, channels, channels, 1),
        )

    @property
    def channels(self) -> int:
        return self.fuse.out_channels

    def layers(self) -> List[ConvLayer]:
        return [self.split_a, self.split_b, self.bottleneck_reduce, self.bottleneck_conv, self.fuse]

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def param_count(self) -> ParamCount:
        return sum((conv_param_count(layer) for layer in self.layers()), ParamCount())


def csp_block(x: Tensor, weights: CspWeights) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"csp_block: expected N x C x H x W, got {x.shape}")
    if x.shape[1] % 2:
        raise ShapeError(f"csp_block: channel count {x.shape[1]} is odd")
    if x.shape[1] != weights.channels:
        raise ShapeError(f"csp_block: input has {x.shape[1]} channels, weights expect {weights.channels}")

    a = conv2d(x, weights.split_a)
    b = conv2d(x, weights.split_b)
    a = elementwise_add(a, conv2d(conv2d(a, weights.bottleneck_reduce), weights.bottleneck_conv))
    return conv2d(concat_channels([a, b]), weights.fuse)


@dataclass
class BranchNorm:
    gamma: Tensor
    beta: Tensor
    slope: Tensor
    running_stats: RunningStats

    @classmethod
    def create(cls, channels: int) -> "BranchNorm":
        return cls(
            gamma=Tensor.ones((channels,)),
            beta=Tensor.zeros((channels,)),
            slope=Tensor(np.full(channels, PRELU_INIT)),
            running_stats=RunningStats.create(channels),
        )

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta, self.slope]


@dataclass
class CfLayerWeights:
    goct: GOctConvWeights
    norms: List[BranchNorm]
    csps: List[CspWeights] = field(default_factory=list)

    @classmethod
    def create(cls, rng: np.random.Generator, config: CfConfig, index: int = 0) -> "CfLayerWeights":
        in_stages, out_stages = config.layer_stages(index)
        return cls(
            goct=GOctConvWeights.create(rng, in_stages, out_stages, config.K),
            norms=[BranchNorm.create(stage.channels) for stage in out_stages],
            csps=[CspWeights.create(rng, stage.channels) for stage in out_stages],
        )

    def parameters(self) -> List[Tensor]:
        params = self.goct.parameters()
        for norm, csp in zip(self.norms, self.csps):
            params.extend(norm.parameters())
            params.extend(csp.parameters())
        return params

    def param_count(self) -> ParamCount:
        count = self.goct.param_count()
        for norm, csp in zip(self.norms, self.csps):
            count = count + ParamCount(bn=norm.gamma.size + norm.beta.size, prelu=norm.slope.size)
            count = count + csp.param_count()
        return count


def cf_layer(inputs: Sequence[Tensor], config: CfConfig, weights: CfLayerWeights,
             training: bool = True) -> List[Tensor]:
    fused = goctconv(inputs, config, weights.goct)
    outputs = []
    for y, norm, csp in zip(fused, weights.norms, weights.csps):
        y = batchnorm(y, norm.gamma, norm.beta, running_stats=norm.running_stats, training=training)
        outputs.append(csp_block(prelu(y, norm.slope), csp))
    return outputs


def count_params(module: object) -> ParamCount:
    """Parameter counts of a conv layer, a CF building block, or anything exposing param_count()."""
    if isinstance(module, ConvLayer):
        return conv_param_count(module)
    counter = getattr(module, "param_count", None)
    if counter is None:
        raise TypeError(f"cannot count parameters of {type(module).__name__}")
    return counter()

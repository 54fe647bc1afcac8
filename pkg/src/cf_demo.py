"""End-to-end exercise of a Cross Fusion neck: a toy backbone plus neck regressing fixed targets."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import structlog

from .cross_fusion import CfConfig, StageSpec
from .errors import TrainingDivergedError
from .necks import ConvWeights, build_cf_neck
from .tensor_core import SGD, ConvLayer, GradTape, Tensor, add_scalars, affine, conv2d, mse, prelu

logger = structlog.get_logger()

DEMO_STAGES = (StageSpec(8, 1), StageSpec(16, 2), StageSpec(32, 4))
DIVERGENCE_FACTOR = 10.0
TARGET_STD = 0.1
TARGET_BLUR_PASSES = 2


def default_demo_config(K: int = 1) -> CfConfig:
    return CfConfig(in_stages=DEMO_STAGES, out_stages=DEMO_STAGES, n=2, K=K)


@dataclass
class DemoLog:
    losses: List[float] = field(default_factory=list)
    lr: float = 0.0
    seed: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def build_backbone(rng: np.random.Generator, stages, in_channels: int = 3) -> List[ConvWeights]:
    """One strided 3x3 conv + PReLU per stage; strides follow the stage scale ratios."""
    layers = []
    previous_channels, previous_scale = in_channels, 1
    for stage in stages:
        stride = stage.scale // previous_scale
        conv = ConvLayer.create(rng, previous_channels, stage.channels, 3, stride=stride, padding=1)
        layers.append(ConvWeights(conv, Tensor(np.full(stage.channels, 0.25))))
        previous_channels, previous_scale = stage.channels, stage.scale
    return layers


def backbone_forward(x: Tensor, layers: List[ConvWeights]) -> List[Tensor]:
    features = []
    for layer in layers:
        x = prelu(conv2d(x, layer.conv), layer.slope)
        features.append(x)
    return features


def _box_blur(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    height, width = x.shape[2], x.shape[3]
    return sum(padded[:, :, i:i + height, j:j + width] for i in range(3) for j in range(3)) / 9.0


def smooth_targets(rng: np.random.Generator, shapes, std: float = TARGET_STD,
                   passes: int = TARGET_BLUR_PASSES) -> List[Tensor]:
    """Gaussian noise blurred by repeated 3x3 box filters, rescaled to the requested standard deviation."""
    targets = []
    for shape in shapes:
        blurred = rng.standard_normal(shape)
        for _ in range(passes):
            blurred = _box_blur(blurred)
        blurred = blurred - blurred.mean()
        targets.append(Tensor(blurred * (std / max(float(blurred.std()), 1e-12))))
    return targets


def overfit_demo(config: Optional[CfConfig] = None, seed: int = 0, steps: int = 500, lr: float = 0.01,
                 momentum: float = 0.9, base: int = 16) -> DemoLog:
    config = config or default_demo_config()
    if base % config.in_stages[-1].scale or base % config.out_stages[-1].scale:
        raise ValueError(f"base resolution {base} is not divisible by the deepest stage scale")
    demo_logger = logger.bind(component="cf_demo")

    rng = np.random.default_rng(seed)
    backbone = build_backbone(rng, config.in_stages)
    neck = build_cf_neck(config, rng=rng)
    image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, base, base)))
    targets = smooth_targets(rng, [(1, s.channels, base // s.scale, base // s.scale) for s in config.out_stages])

    params = [p for layer in backbone for p in layer.parameters()] + neck.parameters()
    optimizer = SGD(params, lr=lr, momentum=momentum)
    log = DemoLog(lr=lr, seed=seed)

    demo_logger.info("Starting CF overfit demo", steps=steps, lr=lr, parameters=sum(p.size for p in params),
                     n=config.n, K=config.K)
    for step in range(steps):
        with GradTape() as tape:
            outputs = neck.forward(backbone_forward(image, backbone), training=True)
            loss = affine(add_scalars([mse(y, t) for y, t in zip(outputs, targets)]), 1.0 / len(outputs))
        value = loss.item()

        if not np.isfinite(value):
            raise TrainingDivergedError(f"demo loss became non-finite ({value})", step=step, log=log)
        if log.losses and value > DIVERGENCE_FACTOR * log.losses[0]:
            raise TrainingDivergedError(
                f"demo loss {value:.6g} exceeds {DIVERGENCE_FACTOR:g}x the initial {log.losses[0]:.6g}",
                step=step, log=log,
            )

        log.losses.append(value)
        optimizer.step(tape.gradient(loss, params))
        if step % 50 == 0:
            demo_logger.info("Demo progress", step=step, loss=value)

    demo_logger.info("CF overfit demo finished", final_loss=log.final_loss)
    return log

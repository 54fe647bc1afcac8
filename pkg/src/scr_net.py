"""Snow-response network trained without labels.

The network is a short stack of same-padded 3x3 convolutions, each followed by
Peak Act. During training the 32 output channels are collapsed by a per-pixel
maximum (the training head) and pushed towards an all-ones target with an L1
penalty on every parameter. At test time the raw 32-channel map (the testing
head) is read and one channel, selected on calibration images, is binarized
into a snow map.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .activations import PEAK_ACT, Activation, ActivationKind
from .errors import ChannelSelectionError, ShapeError, TrainingDivergedError
from .image_io import save_image
from .tensor_core import (
    SGD,
    ConvLayer,
    GradTape,
    Tensor,
    add_scalars,
    affine,
    conv2d,
    l1_norm,
    max_over_channels,
    mean,
)

logger = structlog.get_logger()

OUT_CHANNELS = 32
DEFAULT_WIDTHS = (3, 16, 32, 32, 32)
DEFAULT_INIT_SCALE = 0.1
DEFAULT_THRESHOLD = 0.5

# Hidden activation of the snow-detector preset.
DETECTOR_HIDDEN_ACTIVATION = Activation(ActivationKind.LEAKY_RELU, 0.1)


@dataclass
class LossSpec:
    alpha: float = 1.0
    beta: float = 1e-4

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")


@dataclass
class ScrModel:
    layers: List[ConvLayer]
    activations: List[Activation]
    selected_channel: Optional[int] = None
    binarize_threshold: float = DEFAULT_THRESHOLD
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ShapeError("an SCR model needs at least one conv layer")
        if len(self.activations) != len(self.layers):
            raise ShapeError(f"{len(self.layers)} layers but {len(self.activations)} activations")
        for previous, layer in zip(self.layers, self.layers[1:]):
            if layer.in_channels != previous.out_channels:
                raise ShapeError(
                    f"layer expects {layer.in_channels} channels but the previous layer yields {previous.out_channels}"
                )
        if self.layers[-1].out_channels != OUT_CHANNELS:
            raise ShapeError(f"final layer must produce {OUT_CHANNELS} channels, got {self.layers[-1].out_channels}")
        if self.selected_channel is not None:
            self.select_channel(self.selected_channel)

    @property
    def widths(self) -> List[int]:
        return [self.layers[0].in_channels] + [layer.out_channels for layer in self.layers]

    @property
    def architecture(self) -> str:
        return "-".join(str(w) for w in self.widths)

    @property
    def has_bias(self) -> bool:
        return self.layers[0].bias is not None

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def select_channel(self, channel: int) -> None:
        if not 0 <= channel < OUT_CHANNELS:
            raise ChannelSelectionError(f"channel {channel} is outside [0, {OUT_CHANNELS})")
        self.selected_channel = int(channel)

    def testing_head(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.layers[0].in_channels:
            raise ShapeError(f"expected an N x {self.layers[0].in_channels} x H x W batch, got {x.shape}")
        for layer, activation in zip(self.layers, self.activations):
            x = activation(conv2d(x, layer))
        return x

    def training_head(self, x: Tensor) -> Tensor:
        return max_over_channels(self.testing_head(x))


def build_scr_model(seed: int, hidden_activation: Activation = PEAK_ACT, final_activation: Activation = PEAK_ACT,
                    bias: bool = True, init_scale: float = DEFAULT_INIT_SCALE,
                    widths: Sequence[int] = DEFAULT_WIDTHS, kernel_size: int = 3) -> ScrModel:
    if len(widths) < 2:
        raise ValueError(f"widths needs at least an input and an output width, got {list(widths)}")
    if init_scale <= 0:
        raise ValueError(f"init_scale must be positive, got {init_scale}")

    rng = np.random.default_rng(seed)
    layers = [
        ConvLayer.create(rng, c_in, c_out, kernel_size, stride=1, padding=kernel_size // 2, bias=bias,
                         scale=init_scale)
        for c_in, c_out in zip(widths, widths[1:])
    ]
    activations = [hidden_activation] * (len(layers) - 1) + [final_activation]
    return ScrModel(layers=layers, activations=activations, seed=seed)


def build_snow_detector(seed: int, init_scale: float = DEFAULT_INIT_SCALE) -> ScrModel:
    """Bias-free model with LeakyReLU(0.1) hidden layers and Peak Act on the output.

    Every layer maps a zero input to zero and the hidden stack is positively
    homogeneous, so no channel can answer with a constant: a channel that reaches
    Peak Act's top on bright snow stays low on dark texture.
    """
    return build_scr_model(seed, hidden_activation=DETECTOR_HIDDEN_ACTIVATION, final_activation=PEAK_ACT,
                           bias=False, init_scale=init_scale)


def stack_images(images: Sequence[Tensor]) -> Tensor:
    if not images:
        raise ValueError("no images to stack")
    first = images[0].shape
    for image in images:
        if image.data.ndim != 3:
            raise ShapeError(f"images must be C x H x W, got {image.shape}")
        if image.shape != first:
            raise ShapeError(f"full-batch training needs equal image sizes, got {first} and {image.shape}")
    return Tensor(np.stack([image.data for image in images]))


def scr_loss(output: Tensor, model: ScrModel, spec: LossSpec) -> Tensor:
    """alpha * mean(1 - O) + beta * sum(|p|) over every conv weight and bias."""
    if output.data.ndim != 4 or output.shape[1] != 1:
        raise ShapeError(f"scr_loss expects the N x 1 x H x W training-head map, got {output.shape}")
    data_term = affine(mean(output), -spec.alpha, spec.alpha)
    penalty = affine(l1_norm(model.parameters()), spec.beta)
    return add_scalars([data_term, penalty])


def loss_and_gradients(model: ScrModel, batch: Tensor, spec: LossSpec) -> Tuple[float, List[np.ndarray]]:
    params = model.parameters()
    with GradTape() as tape:
        loss = scr_loss(model.training_head(batch), model, spec)
    return loss.item(), tape.gradient(loss, params)


class BatchMode:
    FULL = "full"
    PER_IMAGE = "per-image"
    CHOICES = (FULL, PER_IMAGE)


@dataclass
class TrainingLog:
    losses: List[float] = field(default_factory=list)
    final_loss: Optional[float] = None
    lr: float = 0.0
    seed: int = 0
    batch_mode: str = BatchMode.FULL

    @property
    def initial_loss(self) -> Optional[float]:
        return self.losses[0] if self.losses else self.final_loss

    def rows(self) -> List[Tuple[int, float]]:
        return list(enumerate(self.losses))


def train_scr(model: ScrModel, images: Sequence[Tensor], spec: Optional[LossSpec] = None, lr: float = 0.01,
              epochs: int = 200, seed: int = 0, batch_mode: str = BatchMode.FULL,
              momentum: float = 0.0) -> TrainingLog:
    """Minimizes the SCR loss with plain (or momentum) SGD.

    ``losses[e]`` is the loss at the start of epoch ``e``; ``final_loss`` is
    measured after the last update.
    """
    if not images:
        raise ValueError("training needs at least one image")
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    if batch_mode not in BatchMode.CHOICES:
        raise ValueError(f"batch_mode must be one of {BatchMode.CHOICES}, got '{batch_mode}'")
    spec = spec or LossSpec()
    train_logger = logger.bind(component="scr_trainer")

    rng = np.random.default_rng(seed)
    optimizer = SGD(model.parameters(), lr=lr, momentum=momentum)
    log = TrainingLog(lr=lr, seed=seed, batch_mode=batch_mode)
    full_batch = stack_images(images) if batch_mode == BatchMode.FULL else None

    train_logger.info("Starting SCR training", images=len(images), epochs=epochs, lr=lr, batch_mode=batch_mode,
                       parameters=model.parameter_count())

    for epoch in range(epochs):
        if full_batch is not None:
            epoch_loss, grads = loss_and_gradients(model, full_batch, spec)
            _check_finite(epoch_loss, epoch, log)
            optimizer.step(grads)
        else:
            step_losses = []
            for index in rng.permutation(len(images)):
                step_loss, grads = loss_and_gradients(model, stack_images([images[index]]), spec)
                _check_finite(step_loss, epoch, log)
                optimizer.step(grads)
                step_losses.append(step_loss)
            epoch_loss = float(np.mean(step_losses))

        log.losses.append(epoch_loss)
        train_logger.debug("Epoch finished", epoch=epoch, loss=epoch_loss)
        if epoch % 25 == 0:
            train_logger.info("Training progress", epoch=epoch, loss=epoch_loss)

    log.final_loss = evaluate_loss(model, images, spec)
    _check_finite(log.final_loss, epochs, log)
    train_logger.info("SCR training finished", initial_loss=log.initial_loss, final_loss=log.final_loss)
    return log


def evaluate_loss(model: ScrModel, images: Sequence[Tensor], spec: LossSpec) -> float:
    losses = [scr_loss(model.training_head(stack_images([image])), model, spec).item() for image in images]
    # the penalty term is identical per image, so the mean matches a full-batch evaluation
    return float(np.mean(losses))


def _check_finite(value: float, epoch: int, log: TrainingLog) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"SCR loss became non-finite ({value})", step=epoch, log=log)


def channel_responses(model: ScrModel, image: Tensor) -> np.ndarray:
    """32 x H x W testing-head map for a single C x H x W image."""
    return model.testing_head(stack_images([image])).data[0]


def binarized_channel_means(model: ScrModel, images: Sequence[Tensor]) -> np.ndarray:
    per_image = [
        (channel_responses(model, image) >= model.binarize_threshold).mean(axis=(1, 2)) for image in images
    ]
    return np.mean(per_image, axis=0)


@dataclass
class ChannelSelection:
    channel: int
    scores: np.ndarray
    status: str = "ok"

    def score_table(self) -> List[Tuple[int, float]]:
        return [(c, float(s)) for c, s in enumerate(self.scores)]


def select_snow_channel(model: ScrModel, snow_calib: Sequence[Tensor], clean_calib: Sequence[Tensor],
                        override: Optional[int] = None) -> ChannelSelection:
    if not snow_calib or not clean_calib:
        raise ChannelSelectionError("both calibration sets must be non-empty")

    scores = binarized_channel_means(model, snow_calib) - binarized_channel_means(model, clean_calib)
    channel = int(np.argmax(scores)) if override is None else int(override)
    status = "ok"
    if np.all(scores <= 0):
        status = "warning"
        logger.warning("No channel responds more to snow than to clean images", best_score=float(scores.max()))

    model.select_channel(channel)
    logger.info("Snow channel selected", channel=channel, score=float(scores[channel]), overridden=override is not None)
    return ChannelSelection(channel=channel, scores=scores, status=status)


@dataclass
class SnowMap:
    float_map: np.ndarray
    binary_map: np.ndarray
    channel: int


def infer_snow_map(model: ScrModel, image: Tensor, channel: Optional[int] = None) -> SnowMap:
    channel = model.selected_channel if channel is None else channel
    if channel is None:
        raise ChannelSelectionError(
            "no snow channel selected; run channel selection on calibration images or pass an explicit channel"
        )
    if not 0 <= channel < OUT_CHANNELS:
        raise ChannelSelectionError(f"channel {channel} is outside [0, {OUT_CHANNELS})")

    float_map = channel_responses(model, image)[channel]
    return SnowMap(float_map=float_map, binary_map=float_map >= model.binarize_threshold, channel=channel)


def iou(prediction: np.ndarray, mask: np.ndarray) -> float:
    prediction = np.asarray(prediction, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if prediction.shape != mask.shape:
        raise ShapeError(f"iou: shapes {prediction.shape} and {mask.shape} differ")
    union = np.logical_or(prediction, mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(prediction, mask).sum() / union)


DEFAULT_VARIANTS: Dict[str, Tuple[str, str]] = {
    "sigmoid": ("sigmoid", "sigmoid"),
    "relu": ("relu", "relu"),
    "leaky-relu": ("leaky-relu:0.1", "leaky-relu:0.1"),
    "leaky-relu+peak-act": ("leaky-relu:0.1", "peak-act"),
    "peak-act": ("peak-act", "peak-act"),
}


@dataclass
class ActivationComparison:
    variant: str
    final_loss: float
    channel: int
    contrast: float
    iou: float


def compare_activations(images: Sequence[Tensor], masks: Sequence[np.ndarray],
                        variants: Optional[Dict[str, Tuple[str, str]]] = None, spec: Optional[LossSpec] = None,
                        lr: float = 0.01, epochs: int = 50, seed: int = 0) -> List[ActivationComparison]:
    """Trains one model per (hidden, final) activation pair and scores its most snow-selective channel.

    The best channel maximizes the mean response on masked snow pixels minus the
    mean response elsewhere; its binarized map is compared to the masks by IoU.
    """
    if len(images) != len(masks):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    variants = variants or DEFAULT_VARIANTS
    results = []
    for name, (hidden, final) in variants.items():
        model = build_scr_model(seed, hidden_activation=Activation.parse(hidden),
                                final_activation=Activation.parse(final))
        log = train_scr(model, images, spec=spec, lr=lr, epochs=epochs, seed=seed)

        responses = [channel_responses(model, image) for image in images]
        contrasts = np.mean([
            r[:, m].mean(axis=1) - (r[:, ~m].mean(axis=1) if (~m).any() else 0.0)
            for r, m in zip(responses, (np.asarray(mask, dtype=bool) for mask in masks))
        ], axis=0)
        channel = int(np.argmax(contrasts))
        overlap = float(np.mean([
            iou(r[channel] >= model.binarize_threshold, mask) for r, mask in zip(responses, masks)
        ]))
        results.append(ActivationComparison(name, float(log.final_loss or 0.0), channel,
                                            float(contrasts[channel]), overlap))
        logger.info("Activation variant evaluated", variant=name, channel=channel,
                    contrast=float(contrasts[channel]), iou=overlap)
    return results


def export_channel_maps(model: ScrModel, image: Tensor, out_dir: Union[str, Path]) -> List[Path]:
    """Writes every testing-head channel, clamped to [0, 1], as channel_XX.pgm."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for channel, response in enumerate(channel_responses(model, image)):
        path = out_dir / f"channel_{channel:02d}.pgm"
        save_image(np.clip(response, 0.0, 1.0), path)
        paths.append(path)
    logger.info("Channel maps exported", out_dir=str(out_dir), channels=len(paths))
    return paths

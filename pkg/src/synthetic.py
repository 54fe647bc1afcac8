"""Synthetic snow imagery with exact masks, for training and end-to-end checks."""

from typing import Tuple

import numpy as np

from .scr_net import ScrModel, build_scr_model
from .tensor_core import Tensor

SNOW_LOW, SNOW_HIGH = 0.9, 1.0
TEXTURE_LOW, TEXTURE_HIGH = 0.05, 0.3


def dark_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """3 x H x W background of dark, mildly structured noise."""
    coarse = rng.uniform(TEXTURE_LOW, TEXTURE_HIGH, size=(3, (height + 3) // 4, (width + 3) // 4))
    blocks = np.repeat(np.repeat(coarse, 4, axis=1), 4, axis=2)[:, :height, :width]
    fine = rng.uniform(-0.03, 0.03, size=(3, height, width))
    return np.clip(blocks + fine, TEXTURE_LOW, TEXTURE_HIGH)


def snow_image(rng: np.random.Generator, height: int = 64, width: int = 64,
               coverage: float = 0.75) -> Tuple[Tensor, np.ndarray]:
    """White disks over dark texture until at least ``coverage`` of the pixels are snow."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
    image = dark_texture(rng, height, width)
    mask = np.zeros((height, width), dtype=bool)
    rows, cols = np.mgrid[0:height, 0:width]
    max_radius = max(2, min(height, width) // 4)
    while mask.mean() < coverage:
        cy, cx = rng.integers(0, height), rng.integers(0, width)
        radius = rng.integers(2, max_radius + 1)
        mask |= (rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius
    snow = rng.uniform(SNOW_LOW, SNOW_HIGH, size=(height, width))
    image[:, mask] = snow[mask]
    return Tensor(image), mask


def clean_image(rng: np.random.Generator, height: int = 64, width: int = 64) -> Tensor:
    return Tensor(dark_texture(rng, height, width))


def white_image(height: int = 64, width: int = 64) -> Tensor:
    return Tensor(np.ones((3, height, width)))


def coverage_image(rng: np.random.Generator, height: int, width: int, box: Tuple[int, int, int, int],
                   coverage: float) -> Tuple[Tensor, np.ndarray]:
    """Dark image whose integer box (x, y, w, h) has exactly round(coverage * area) pure-white pixels.

    Snow fills the box row by row from its top-left corner; nothing outside the
    box is white.
    """
    x, y, w, h = box
    if x < 0 or y < 0 or x + w > width or y + h > height or w <= 0 or h <= 0:
        raise ValueError(f"box {box} does not fit a {width}x{height} image")
    image = dark_texture(rng, height, width)
    mask = np.zeros((height, width), dtype=bool)
    region = np.zeros(w * h, dtype=bool)
    region[:int(round(coverage * w * h))] = True
    mask[y:y + h, x:x + w] = region.reshape(h, w)
    image[:, mask] = 1.0
    return Tensor(image), mask


def white_detector_model(channel: int = 31) -> ScrModel:
    """Hand-set default-architecture model whose ``channel`` reads 1 on white pixels and ~0 on dark ones.

    Layer 1 averages RGB at the kernel centre into channel 0, the middle layers
    copy channel 0 forward and the last layer writes it to ``channel``. Every
    other weight and bias is zero, so the remaining channels stay at 0.
    """
    model = build_scr_model(seed=0)
    for layer in model.layers:
        layer.weights.data[...] = 0.0
        if layer.bias is not None:
            layer.bias.data[...] = 0.0
    center = model.layers[0].kernel_size // 2
    model.layers[0].weights.data[0, :, center, center] = 1.0 / 3.0
    for layer in model.layers[1:-1]:
        layer.weights.data[0, 0, center, center] = 1.0
    model.layers[-1].weights.data[channel, 0, center, center] = 1.0
    return model

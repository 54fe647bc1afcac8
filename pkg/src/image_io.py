"""Binary PPM (P6) / PGM (P5) codec, with PNG through pypng when installed."""

from pathlib import Path
from typing import Tuple, Union

import numpy as np
import structlog

from .errors import ConfigError, ParseError, ShapeError
from .tensor_core import Tensor

logger = structlog.get_logger()

PathLike = Union[str, Path]
_WHITESPACE = b" \t\r\n\v\f"


def _next_token(blob: bytes, offset: int, path: str) -> Tuple[bytes, int]:
    """Returns the next header token and the offset just past it, skipping comments."""
    while offset < len(blob):
        if blob[offset:offset + 1] == b"#":
            end = blob.find(b"\n", offset)
            offset = len(blob) if end < 0 else end + 1
        elif blob[offset] in _WHITESPACE:
            offset += 1
        else:
            break
    start = offset
    while offset < len(blob) and blob[offset] not in _WHITESPACE and blob[offset:offset + 1] != b"#":
        offset += 1
    if start == offset:
        raise ParseError("header ends prematurely", path=path, offset=start)
    return blob[start:offset], offset


def _header_int(blob: bytes, offset: int, path: str, what: str) -> Tuple[int, int]:
    token, end = _next_token(blob, offset, path)
    if not token.isdigit():
        raise ParseError(f"{what} must be a decimal integer, got {token!r}", path=path, offset=end - len(token))
    value = int(token)
    if value <= 0:
        raise ParseError(f"{what} must be positive, got {value}", path=path, offset=end - len(token))
    return value, end


def decode_pnm(blob: bytes, path: str = "<memory>") -> np.ndarray:
    """Decodes P5/P6 into a float array C x H x W in [0, 1] (C is 1 or 3)."""
    magic, offset = _next_token(blob, 0, path)
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}, expected P5 or P6", path=path, offset=0)
    channels = 1 if magic == b"P5" else 3

    width, offset = _header_int(blob, offset, path, "width")
    height, offset = _header_int(blob, offset, path, "height")
    maxval, offset = _header_int(blob, offset, path, "maxval")
    if maxval > 65535:
        raise ParseError(f"maxval {maxval} exceeds 65535", path=path, offset=offset)
    if offset >= len(blob) or blob[offset] not in _WHITESPACE:
        raise ParseError("expected a single whitespace byte before the raster", path=path, offset=offset)
    offset += 1

    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    needed = count * dtype.itemsize
    if len(blob) - offset < needed:
        raise ParseError(f"raster holds {len(blob) - offset} bytes, expected {needed}", path=path,
                         offset=len(blob))

    raster = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).astype(np.float64)
    if raster.max(initial=0) > maxval:
        raise ParseError(f"sample exceeds maxval {maxval}", path=path, offset=offset)
    return (raster / maxval).reshape(height, width, channels).transpose(2, 0, 1)


def encode_pnm(array: np.ndarray) -> bytes:
    array = _as_chw(array)
    channels, height, width = array.shape
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    return header + quantize(array).transpose(1, 2, 0).tobytes()


def quantize(array: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def _as_chw(image: Union[Tensor, np.ndarray]) -> np.ndarray:
    array = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    array = array.astype(np.float64)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3 or array.shape[0] not in (1, 3):
        raise ShapeError(f"images must be H x W, 1 x H x W or 3 x H x W, got {array.shape}")
    return array


def load_image(path: PathLike) -> Tensor:
    """Reads an image as a 3 x H x W tensor in [0, 1]; grayscale is replicated to RGB."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        array = _read_png(path)
    else:
        array = decode_pnm(path.read_bytes(), path=str(path))
    if array.shape[0] == 1:
        array = np.repeat(array, 3, axis=0)
    return Tensor(array)


def save_image(image: Union[Tensor, np.ndarray], path: PathLike) -> None:
    """Writes P6 for 3-channel and P5 for 1-channel data (PNG by suffix); values are clamped to [0, 1]."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        _write_png(_as_chw(image), path)
    else:
        path.write_bytes(encode_pnm(image))
    logger.debug("Image written", path=str(path))


def _png_module():
    try:
        import png
    except ImportError as e:
        raise ConfigError("PNG support needs the optional 'png' extra (pip install snowfuse[png])") from e
    return png


def _read_png(path: Path) -> np.ndarray:
    png = _png_module()
    try:
        width, height, rows, _ = png.Reader(filename=str(path)).asRGBA8()
        pixels = np.vstack([np.asarray(row, dtype=np.float64) for row in rows])
    except png.Error as e:
        raise ParseError(f"invalid PNG: {e}", path=str(path)) from e
    rgb = pixels.reshape(height, width, 4)[:, :, :3]
    return rgb.transpose(2, 0, 1) / 255.0


def _write_png(array: np.ndarray, path: Path) -> None:
    png = _png_module()
    channels, height, width = array.shape
    rows = quantize(array).transpose(1, 2, 0).reshape(height, width * channels)
    writer = png.Writer(width=width, height=height, greyscale=channels == 1, bitdepth=8)
    with open(path, "wb") as f:
        writer.write(f, rows.tolist())

import struct
from pathlib import Path
from typing import Union

import numpy as np
import structlog

from .errors import ParseError
from .tensor_core import Tensor

logger = structlog.get_logger()

MAGIC = b"SNFT"
VERSION = 1
_U32 = struct.Struct("<I")


def encode_tensor(tensor: Tensor) -> bytes:
    header = bytearray(MAGIC)
    header += _U32.pack(VERSION)
    header += _U32.pack(len(tensor.shape))
    for dim in tensor.shape:
        header += _U32.pack(dim)
    return bytes(header) + tensor.data.astype("<f8").tobytes()


def decode_tensor(blob: bytes, path: Union[str, Path, None] = None) -> Tensor:
    source = str(path) if path is not None else None

    def read_u32(offset: int, what: str) -> int:
        if offset + 4 > len(blob):
            raise ParseError(f"truncated header while reading {what}", path=source, offset=offset)
        return _U32.unpack_from(blob, offset)[0]

    if blob[:4] != MAGIC:
        raise ParseError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", path=source, offset=0)
    version = read_u32(4, "version")
    if version != VERSION:
        raise ParseError(f"unsupported tensor format version {version}", path=source, offset=4)
    rank = read_u32(8, "rank")

    offset = 12
    shape = []
    for axis in range(rank):
        shape.append(read_u32(offset, f"dimension {axis}"))
        offset += 4

    count = int(np.prod(shape)) if shape else 1
    expected = offset + 8 * count
    if len(blob) < expected:
        raise ParseError(f"payload holds {len(blob) - offset} bytes, expected {8 * count}",
                         path=source, offset=len(blob))
    if len(blob) > expected:
        raise ParseError(f"{len(blob) - expected} trailing bytes after payload", path=source, offset=expected)

    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(tuple(shape))
    return Tensor(data.astype(np.float64))


def save_tensor(tensor: Tensor, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(tensor))
    logger.debug("Tensor saved", path=str(path), shape=list(tensor.shape))


def load_tensor(path: Union[str, Path]) -> Tensor:
    return decode_tensor(Path(path).read_bytes(), path=path)

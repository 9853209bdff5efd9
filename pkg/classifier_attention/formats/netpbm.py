"""
Binary 8-bit Netpbm images: P5 (grayscale) and P6 (RGB).

Pixels are mapped linearly to [0, 1] on read. Writing rounds half-up, so a
write/read round trip reproduces 8-bit data exactly.
"""
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from ..exceptions import ImageFormatError, RejectedInputError
from ..tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

_CHANNELS = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\n\r\v\f"


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read ``count`` whitespace-separated tokens after the magic, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the header.
    """
    tokens, pos = [], 2
    while len(tokens) < count:
        if pos >= len(data):
            raise ImageFormatError("truncated header", field="header")
        byte = data[pos:pos + 1]
        if byte in _WHITESPACE:
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("truncated header", field="header")
            pos = end + 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1] not in _WHITESPACE:
                pos += 1
            tokens.append(data[start:pos])
    return tokens, pos


def read_image(path: Union[str, Path]) -> Tensor:
    """Read a P5/P6 file into a C×H×W tensor with values in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in _CHANNELS:
        raise ImageFormatError(f"unsupported magic {magic!r}", field="magic")
    channels = _CHANNELS[magic]
    tokens, pos = _header_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError("non-integer header field", field="header")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad extents {width}x{height}", field="extents")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}", field="maxval")
    if pos >= len(data):
        raise ImageFormatError("truncated header", field="header")
    raster = data[pos + 1:]
    expected = width * height * channels
    if len(raster) < expected:
        raise ImageFormatError("truncated raster", field="raster")
    pixels = np.frombuffer(raster[:expected], dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(image: Tensor) -> np.ndarray:
    """Quantize [0, 1] values to uint8 with round-half-up."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(path: Union[str, Path], image: Tensor) -> None:
    """Write a 1×H×W tensor as P5 or a 3×H×W tensor as P6."""
    image = as_tensor(image, rank=3)
    if image.shape[0] not in (1, 3):
        raise RejectedInputError(f"images must be 1×H×W or 3×H×W, got shape {image.shape}")
    channels, height, width = image.shape
    magic = b"P5" if channels == 1 else b"P6"
    header = magic + f"\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_bytes(image).transpose(1, 2, 0).tobytes())


def as_rgb(image: Tensor) -> Tensor:
    return np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image

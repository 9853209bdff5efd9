"""Binary feature-map files: "FMAP", u32 version, u32 C, H, W, then f32 payload.

All fields are little-endian with no padding; the payload is channel-major.
"""
import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from ..exceptions import FeatureMapFormatError
from ..tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

MAGIC = b"FMAP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def write_feature_maps(path: Union[str, Path], tensor: Tensor) -> None:
    tensor = as_tensor(tensor, rank=3)
    c, h, w = tensor.shape
    payload = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, c, h, w) + payload)


def read_feature_maps(path: Union[str, Path]) -> Tensor:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FeatureMapFormatError("truncated header", field="header")
    magic, version, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureMapFormatError("bad magic", field="magic")
    if version != VERSION:
        raise FeatureMapFormatError(f"unsupported version {version}", field="version")
    expected = c * h * w * 4
    payload = data[_HEADER.size:]
    if len(payload) < expected:
        raise FeatureMapFormatError("truncated payload", field="payload")
    if len(payload) > expected:
        raise FeatureMapFormatError("trailing bytes after payload", field="payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(c, h, w)

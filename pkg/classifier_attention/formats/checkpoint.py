"""
Model checkpoints.

Layout (little-endian, no padding): "ACAM", u32 version, u32 scale count,
then per scale:
    u32 layer count; per layer u32 c_out, c_in, k followed by
        c_out·c_in·k·k weights and c_out biases
    u32 n, L, C; n·(L+1)·C bank weights, n·(L+1) bank biases
    L·C object weights, L object biases
All reals are float64. A zero-layer backbone is the identity backbone.
"""
import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from ..attention import LocalClassifierBank
from ..backbone import ConvBlock, IdentityBackbone, ToyBackbone
from ..exceptions import CheckpointFormatError, ClassifierAttentionError
from ..losses import ObjectClassifier
from ..multiscale import MultiScaleModel, ScaleModel

logger = logging.getLogger(__name__)

MAGIC = b"ACAM"
VERSION = 1


def _write_u32(fh: BinaryIO, *values: int) -> None:
    fh.write(struct.pack(f"<{len(values)}I", *values))


def _write_reals(fh: BinaryIO, array: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def dumps_checkpoint(model: MultiScaleModel) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    _write_u32(fh, VERSION, len(model.scales))
    for scale in model.scales:
        layers = scale.backbone.layers
        _write_u32(fh, len(layers))
        for layer in layers:
            c_out, c_in, k, _ = layer.weights.shape
            _write_u32(fh, c_out, c_in, k)
            _write_reals(fh, layer.weights)
            _write_reals(fh, layer.bias)
        bank = scale.bank
        _write_u32(fh, bank.n, bank.num_categories, bank.channels)
        _write_reals(fh, bank.weights)
        _write_reals(fh, bank.bias)
        _write_reals(fh, scale.object_clf.weights)
        _write_reals(fh, scale.object_clf.bias)
    return fh.getvalue()


def write_checkpoint(path: Union[str, Path], model: MultiScaleModel) -> None:
    Path(path).write_bytes(dumps_checkpoint(model))
    logger.info("Wrote %d-scale checkpoint to %s", len(model.scales), path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int, field: str) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointFormatError(f"truncated {field}", field=field)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self, count: int, field: str):
        return struct.unpack(f"<{count}I", self.take(4 * count, field))

    def reals(self, shape, field: str) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count, field), dtype="<f8").astype(np.float64).reshape(shape)


def loads_checkpoint(data: bytes, frozen_backbone: bool = False) -> MultiScaleModel:
    reader = _Reader(data)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", field="magic")
    version, count = reader.u32(2, "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", field="version")
    if count < 1:
        raise CheckpointFormatError("checkpoint holds no scales", field="scale count")

    scales = []
    for index in range(count):
        (depth,) = reader.u32(1, "layer count")
        layers = []
        for _ in range(depth):
            c_out, c_in, k = reader.u32(3, "layer dims")
            layers.append(ConvBlock(
                weights=reader.reals((c_out, c_in, k, k), "layer weights"),
                bias=reader.reals((c_out,), "layer bias"),
            ))
        n, categories, channels = reader.u32(3, "bank dims")
        bank_w = reader.reals((n, categories + 1, channels), "bank weights")
        bank_b = reader.reals((n, categories + 1), "bank bias")
        obj_w = reader.reals((categories, channels), "object weights")
        obj_b = reader.reals((categories,), "object bias")
        try:
            backbone = ToyBackbone(layers, frozen=frozen_backbone) if layers else IdentityBackbone(channels)
            scales.append(ScaleModel(backbone, LocalClassifierBank(bank_w, bank_b), ObjectClassifier(obj_w, obj_b), index))
        except ClassifierAttentionError as e:
            raise CheckpointFormatError(f"inconsistent scale {index + 1}: {e}", field="scale")
    if reader.pos != len(data):
        raise CheckpointFormatError("trailing bytes after last scale", field="trailer")
    return MultiScaleModel(scales)


def read_checkpoint(path: Union[str, Path], frozen_backbone: bool = False) -> MultiScaleModel:
    return loads_checkpoint(Path(path).read_bytes(), frozen_backbone=frozen_backbone)

"""Resampling helpers shared by cropping, preprocessing and heatmap export."""
import math

import numpy as np

from .exceptions import RejectedInputError
from .tensor import Tensor


def _sample_axis(n_in: int, n_out: int):
    # Corner-aligned: output index 0 maps to input 0, the last to n_in - 1.
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize a C×H×W tensor with corner-aligned bilinear interpolation."""
    if image.ndim != 3 or image.shape[1] == 0 or image.shape[2] == 0:
        raise RejectedInputError(f"cannot resize tensor of shape {image.shape}")
    if out_h < 1 or out_w < 1:
        raise RejectedInputError(f"output extents must be positive, got {out_h}×{out_w}")
    _, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    y0, y1, dy = _sample_axis(h, out_h)
    x0, x1, dx = _sample_axis(w, out_w)
    dy, dx = dy[:, None], dx[None, :]
    top = image[:, y0][:, :, x0] * (1 - dx) + image[:, y0][:, :, x1] * dx
    bottom = image[:, y1][:, :, x0] * (1 - dx) + image[:, y1][:, :, x1] * dx
    return top * (1 - dy) + bottom * dy


def short_edge_shape(height: int, width: int, size: int):
    scale = size / min(height, width)
    return (
        size if height <= width else math.floor(height * scale + 0.5),
        size if width < height else math.floor(width * scale + 0.5),
    )


def resize_short_edge(image: Tensor, size: int) -> Tensor:
    """Scale so the short edge equals ``size``, keeping the aspect ratio."""
    out_h, out_w = short_edge_shape(image.shape[1], image.shape[2], size)
    return bilinear_resize(image, out_h, out_w)

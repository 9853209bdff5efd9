"""
Feature extractors producing the C×H×W maps the local classifiers consume.

``ToyBackbone`` is a small stack of 3×3, stride-2, same-padded convolutions
with ReLU. ``IdentityBackbone`` passes precomputed feature maps through
unchanged, which is how externally extracted features enter the pipeline.
Both expose the same interface: ``forward`` returns the features and a cache,
``backward`` turns a feature cotangent into parameter gradients.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import RejectedInputError
from .tensor import Tensor

logger = logging.getLogger(__name__)

KERNEL = 3
STRIDE = 2


@dataclass
class ConvBlock:
    weights: np.ndarray  # C_out×C_in×3×3
    bias: np.ndarray  # C_out

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


@dataclass
class _LayerCache:
    input_shape: Tuple[int, int, int]
    cols: np.ndarray  # (C_in*9)×(H_out*W_out)
    pre_activation: np.ndarray


@dataclass
class BackboneCache:
    owner: object
    version: int
    layers: List[_LayerCache] = field(default_factory=list)


@dataclass
class BackboneGrads:
    params: Dict[str, np.ndarray]
    input: Optional[Tensor] = None


def _im2col(x: np.ndarray) -> Tuple[np.ndarray, int, int]:
    """Unfold 3×3 stride-2 patches of a zero-padded C×H×W input."""
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (KERNEL, KERNEL), axis=(1, 2))
    windows = windows[:, ::STRIDE, ::STRIDE]  # C×H_out×W_out×3×3
    h_out, w_out = windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * KERNEL * KERNEL, h_out * w_out)
    return cols, h_out, w_out


def _col2im(dcols: np.ndarray, input_shape: Tuple[int, int, int], h_out: int, w_out: int) -> np.ndarray:
    c, h, w = input_shape
    dpadded = np.zeros((c, h + 2, w + 2))
    dcols = dcols.reshape(c, KERNEL, KERNEL, h_out, w_out)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dpadded[:, ki:ki + STRIDE * h_out:STRIDE, kj:kj + STRIDE * w_out:STRIDE] += dcols[:, ki, kj]
    return dpadded[:, 1:h + 1, 1:w + 1]


class ToyBackbone:
    """Stack of conv(3×3, stride 2) + ReLU blocks standing in for a deep FCN."""

    def __init__(self, layers: Sequence[ConvBlock], frozen: bool = False):
        if not layers:
            raise RejectedInputError("a ToyBackbone needs at least one block")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise RejectedInputError("consecutive blocks have mismatched channel counts")
        self.layers = list(layers)
        self.frozen = frozen
        self.version = 0

    @classmethod
    def initialize(cls, widths: Sequence[int], rng: np.random.Generator, frozen: bool = False) -> "ToyBackbone":
        """He-style uniform init, bound sqrt(6 / fan_in), zero biases.

        Args:
            widths: Channel widths including the input, e.g. (3, 16, 32, 64)
            rng: Seeded generator
            frozen: Whether training leaves the weights untouched
        """
        layers = []
        for c_in, c_out in zip(widths, widths[1:]):
            bound = math.sqrt(6.0 / (c_in * KERNEL * KERNEL))
            layers.append(ConvBlock(
                weights=rng.uniform(-bound, bound, size=(c_out, c_in, KERNEL, KERNEL)),
                bias=np.zeros(c_out),
            ))
        return cls(layers, frozen=frozen)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def stride(self) -> int:
        return STRIDE ** self.depth

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels

    def output_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        for _ in range(self.depth):
            height, width = -(-height // STRIDE), -(-width // STRIDE)
        return self.out_channels, height, width

    def parameters(self) -> Dict[str, np.ndarray]:
        if self.frozen:
            return {}
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"backbone.{i}.weights"] = layer.weights
            params[f"backbone.{i}.bias"] = layer.bias
        return params

    def mark_updated(self) -> None:
        self.version += 1

    def forward(self, image: Tensor) -> Tuple[Tensor, BackboneCache]:
        if image.ndim != 3 or image.shape[0] != self.in_channels:
            raise RejectedInputError(
                f"expected a {self.in_channels}×H×W image, got shape {image.shape}"
            )
        if min(image.shape[1:]) < self.stride:
            raise RejectedInputError(
                f"image {image.shape[1]}×{image.shape[2]} is smaller than the backbone stride {self.stride}"
            )
        cache = BackboneCache(owner=self, version=self.version)
        x = image
        for layer in self.layers:
            cols, h_out, w_out = _im2col(x)
            pre = (layer.weights.reshape(layer.out_channels, -1) @ cols + layer.bias[:, None])
            pre = pre.reshape(layer.out_channels, h_out, w_out)
            cache.layers.append(_LayerCache(x.shape, cols, pre))
            x = np.maximum(pre, 0.0)
        return x, cache

    def backward(self, cache: BackboneCache, grad_features: Tensor, input_grad: bool = False) -> BackboneGrads:
        if cache.owner is not self or cache.version != self.version:
            raise RejectedInputError("backbone cache is stale: weights changed after the forward pass")
        if self.frozen and not input_grad:
            return BackboneGrads(params={})

        params: Dict[str, np.ndarray] = {}
        grad = grad_features
        for i in reversed(range(self.depth)):
            layer, lc = self.layers[i], cache.layers[i]
            grad_pre = grad * (lc.pre_activation > 0)
            flat = grad_pre.reshape(layer.out_channels, -1)
            if not self.frozen:
                params[f"backbone.{i}.weights"] = (flat @ lc.cols.T).reshape(layer.weights.shape)
                params[f"backbone.{i}.bias"] = flat.sum(axis=1)
            if i > 0 or input_grad:
                dcols = layer.weights.reshape(layer.out_channels, -1).T @ flat
                grad = _col2im(dcols, lc.input_shape, *lc.pre_activation.shape[1:])
        return BackboneGrads(params=params, input=grad if input_grad else None)


class IdentityBackbone:
    """Pass-through for feature maps computed elsewhere (no parameters, stride 1)."""

    depth = 0
    stride = 1
    frozen = True
    layers: List[ConvBlock] = []

    def __init__(self, channels: int):
        self.channels = channels
        self.version = 0

    @property
    def in_channels(self) -> int:
        return self.channels

    @property
    def out_channels(self) -> int:
        return self.channels

    def output_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        return self.channels, height, width

    def parameters(self) -> Dict[str, np.ndarray]:
        return {}

    def mark_updated(self) -> None:
        self.version += 1

    def forward(self, image: Tensor) -> Tuple[Tensor, BackboneCache]:
        if image.ndim != 3 or image.shape[0] != self.channels:
            raise RejectedInputError(f"expected {self.channels}-channel feature maps, got shape {image.shape}")
        return image, BackboneCache(owner=self, version=self.version)

    def backward(self, cache: BackboneCache, grad_features: Tensor, input_grad: bool = False) -> BackboneGrads:
        if cache.owner is not self or cache.version != self.version:
            raise RejectedInputError("backbone cache is stale")
        return BackboneGrads(params={}, input=grad_features if input_grad else None)


def extract_features(image: Tensor, backbone) -> Tensor:
    """Deterministic forward pass returning only the C×H×W feature maps."""
    features, _ = backbone.forward(image)
    return features


def backbone_backward(backbone, cache: BackboneCache, grad_features: Tensor, input_grad: bool = False) -> BackboneGrads:
    return backbone.backward(cache, grad_features, input_grad=input_grad)

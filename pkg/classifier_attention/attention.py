"""
Attention from classifier activations.

n local classifiers score every feature-map location over L fine-grained
categories plus one background category. Their probability volumes are
max-aggregated across classifiers, the aggregated volume is max-pooled over
the non-background channels into an attention map, and Otsu's method turns
that map into the binary surrogate mask used both as a training target and
to locate the region cropped for the next scale.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .exceptions import RejectedInputError
from .tensor import (
    Tensor,
    conv1x1_backward,
    conv1x1_forward,
    softmax_channel,
    softmax_channel_backward,
)

logger = logging.getLogger(__name__)

AGGREGATE_MODES = ("probs", "logits")


class BBox(NamedTuple):
    """Inclusive box; rows and columns in whatever grid it was computed on."""
    row0: int
    col0: int
    row1: int
    col1: int

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def area(self) -> int:
        return self.height * self.width


@dataclass
class LocalClassifierBank:
    """n linear classifiers mapping C-dim feature columns to L+1 scores."""
    weights: np.ndarray  # n×(L+1)×C
    bias: np.ndarray  # n×(L+1)

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[0] < 1 or self.weights.shape[1] < 2:
            raise RejectedInputError(f"bank weights must be n×(L+1)×C with n ≥ 1, L ≥ 1, got {self.weights.shape}")
        if self.bias.shape != self.weights.shape[:2]:
            raise RejectedInputError(f"bank bias shape {self.bias.shape} does not match weights {self.weights.shape}")

    @classmethod
    def initialize(cls, n: int, num_categories: int, channels: int, rng: np.random.Generator) -> "LocalClassifierBank":
        bound = 1.0 / math.sqrt(channels)
        return cls(
            weights=rng.uniform(-bound, bound, size=(n, num_categories + 1, channels)),
            bias=np.zeros((n, num_categories + 1)),
        )

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def num_categories(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def channels(self) -> int:
        return self.weights.shape[2]

    def parameters(self):
        return {"bank.weights": self.weights, "bank.bias": self.bias}


@dataclass
class AggregatedVolume:
    probs: Tensor  # (L+1)×H×W
    winner: np.ndarray  # (L+1)×H×W, classifier index in [0, n)
    n: int


@dataclass
class AttentionArtifacts:
    map: Tensor  # 1×H×W
    mask: np.ndarray  # H×W of {0, 1}
    foreground_ratio: float
    bbox: BBox
    threshold: int


def _check_bank(features: Tensor, bank: LocalClassifierBank) -> None:
    if features.ndim != 3 or features.shape[0] != bank.channels:
        raise RejectedInputError(
            f"features of shape {features.shape} do not match a bank expecting {bank.channels} channels"
        )


def dense_local_logits(features: Tensor, bank: LocalClassifierBank) -> List[Tensor]:
    _check_bank(features, bank)
    return [conv1x1_forward(features, bank.weights[i], bank.bias[i]) for i in range(bank.n)]


def dense_local_activations(features: Tensor, bank: LocalClassifierBank) -> List[Tensor]:
    """Per-classifier (L+1)×H×W probability volumes."""
    return [softmax_channel(logits) for logits in dense_local_logits(features, bank)]


def _stack(volumes: Sequence[Tensor]) -> np.ndarray:
    if len(volumes) == 0:
        raise RejectedInputError("aggregate needs at least one volume")
    shape = volumes[0].shape
    if any(v.shape != shape for v in volumes):
        raise RejectedInputError("aggregate needs volumes of identical shape")
    return np.stack(volumes)


def aggregate(volumes: Sequence[Tensor]) -> AggregatedVolume:
    """Elementwise max across classifiers, remembering which one won each cell.

    Ties go to the lowest classifier index.
    """
    stacked = _stack(volumes)
    winner = stacked.argmax(axis=0)
    probs = np.take_along_axis(stacked, winner[None], axis=0)[0]
    return AggregatedVolume(probs=probs, winner=winner, n=stacked.shape[0])


def aggregate_backward(agg: AggregatedVolume, grad_probs: Tensor) -> np.ndarray:
    """Route each cell's gradient to its winning classifier (n×(L+1)×H×W)."""
    if grad_probs.shape != agg.probs.shape:
        raise RejectedInputError(f"gradient shape {grad_probs.shape} does not match {agg.probs.shape}")
    grads = np.zeros((agg.n,) + grad_probs.shape)
    np.put_along_axis(grads, agg.winner[None], grad_probs[None], axis=0)
    return grads


@dataclass
class LocalForward:
    """Everything the bank backward pass needs from one forward pass."""
    features: Tensor
    logits: List[Tensor]
    probs: List[Tensor]
    agg: AggregatedVolume
    aggregate_on: str


def local_forward(features: Tensor, bank: LocalClassifierBank, aggregate_on: str = "logits") -> LocalForward:
    """Dense activations followed by classifier-dimension aggregation.

    With ``aggregate_on="probs"`` the max runs over per-classifier softmax
    outputs. With ``"logits"`` it runs over raw scores and the softmax is
    applied once to the aggregated scores.
    """
    if aggregate_on not in AGGREGATE_MODES:
        raise RejectedInputError(f"aggregate_on must be one of {AGGREGATE_MODES}, got '{aggregate_on}'")
    logits = dense_local_logits(features, bank)
    if aggregate_on == "probs":
        probs = [softmax_channel(z) for z in logits]
        agg = aggregate(probs)
    else:
        probs = []
        agg_logits = aggregate(logits)
        agg = AggregatedVolume(softmax_channel(agg_logits.probs), agg_logits.winner, agg_logits.n)
    return LocalForward(features, logits, probs, agg, aggregate_on)


def local_backward(fwd: LocalForward, bank: LocalClassifierBank, grad_probs: Tensor) -> Tuple[np.ndarray, np.ndarray, Tensor]:
    """Backpropagate a cotangent on the aggregated probabilities.

    Returns:
        Tuple: (grad bank weights n×(L+1)×C, grad bank bias n×(L+1), grad features C×H×W)
    """
    if fwd.aggregate_on == "probs":
        routed = aggregate_backward(fwd.agg, grad_probs)
        grad_logits = [softmax_channel_backward(p, g) for p, g in zip(fwd.probs, routed)]
    else:
        grad_agg_logits = softmax_channel_backward(fwd.agg.probs, grad_probs)
        grad_logits = list(aggregate_backward(fwd.agg, grad_agg_logits))

    grad_w = np.zeros_like(bank.weights)
    grad_b = np.zeros_like(bank.bias)
    grad_features = np.zeros_like(fwd.features)
    for i, g in enumerate(grad_logits):
        grads = conv1x1_backward(fwd.features, bank.weights[i], g)
        grad_w[i] = grads.weights
        grad_b[i] = grads.bias
        grad_features += grads.features
    return grad_w, grad_b, grad_features


def attention_map(agg: AggregatedVolume) -> Tensor:
    """Channel max over the fine-grained categories, background (last) excluded."""
    if agg.probs.shape[0] < 2:
        raise RejectedInputError("attention needs at least one fine-grained category besides background")
    return agg.probs[:-1].max(axis=0, keepdims=True)


def quantize(values: np.ndarray, bins: int) -> np.ndarray:
    """Map values linearly onto integer levels 0..bins-1 over [min, max]."""
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) * bins
    return np.minimum(scaled.astype(np.int64), bins - 1)


def otsu_threshold(levels: np.ndarray, bins: int) -> int:
    """Level cut maximizing between-class variance; the lower cut wins ties.

    Classes are ``levels <= t`` and ``levels > t`` for t in 0..bins-2. The
    criterion (n1*S0 - n0*S1)^2 / (n0*n1) is proportional to the between-class
    variance and is compared in exact integer arithmetic.
    """
    hist = np.bincount(levels.ravel(), minlength=bins).tolist()
    total_n = sum(hist)
    total_s = sum(i * h for i, h in enumerate(hist))
    best_t, best_num, best_den = 0, -1, 1
    n0 = s0 = 0
    for t in range(bins - 1):
        n0 += hist[t]
        s0 += t * hist[t]
        n1, s1 = total_n - n0, total_s - s0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            num, den = (n1 * s0 - n0 * s1) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu_binarize(attention: Tensor, bins: int = 256) -> Tuple[np.ndarray, int]:
    """Binarize a 1×H×W map with Otsu's method.

    Returns:
        Tuple: (H×W mask of 0/1 as uint8, threshold level). A constant map
        yields an all-ones mask and threshold -1.
    """
    values = attention.reshape(attention.shape[-2:])
    if values.size == 0:
        raise RejectedInputError("cannot binarize an empty map")
    if bins < 2:
        raise RejectedInputError(f"need at least 2 bins, got {bins}")
    if float(values.max() - values.min()) < 1e-12:
        return np.ones(values.shape, dtype=np.uint8), -1
    levels = quantize(values, bins)
    threshold = otsu_threshold(levels, bins)
    return (levels > threshold).astype(np.uint8), threshold


def foreground_ratio(mask: np.ndarray) -> float:
    """Attended fraction of the grid, clamped to [1/(WH), 1]."""
    cells = mask.size
    return min(max(float(mask.sum()) / cells, 1.0 / cells), 1.0)


def mask_to_bbox(mask: np.ndarray, margin_fraction: float = 0.1) -> BBox:
    """Tight box around the 1-cells, padded by ceil(margin × extent) per side and clipped."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise RejectedInputError("mask has no foreground cells")
    row0, row1, col0, col1 = int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])
    pad_r = math.ceil(margin_fraction * (row1 - row0 + 1))
    pad_c = math.ceil(margin_fraction * (col1 - col0 + 1))
    h, w = mask.shape
    return BBox(max(row0 - pad_r, 0), max(col0 - pad_c, 0), min(row1 + pad_r, h - 1), min(col1 + pad_c, w - 1))


def compute_attention(agg: AggregatedVolume, bins: int = 256, margin_fraction: float = 0.1) -> AttentionArtifacts:
    amap = attention_map(agg)
    mask, threshold = otsu_binarize(amap, bins)
    return AttentionArtifacts(
        map=amap,
        mask=mask,
        foreground_ratio=foreground_ratio(mask),
        bbox=mask_to_bbox(mask, margin_fraction),
        threshold=threshold,
    )

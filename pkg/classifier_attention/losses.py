"""
Softmax losses for one scale: the mask-weighted local loss on the aggregated
volume, the object-level loss on masked, max-pooled features, and their sum.

The surrogate mask is always treated as a constant label; no gradient flows
through the Otsu step.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .attention import AggregatedVolume
from .exceptions import RejectedInputError
from .tensor import (
    PROB_FLOOR,
    MaxPoolResult,
    Tensor,
    spatial_max_pool,
    spatial_max_pool_backward,
)

logger = logging.getLogger(__name__)


@dataclass
class ObjectClassifier:
    """Linear classifier over the L fine-grained categories (no background)."""
    weights: np.ndarray  # L×C
    bias: np.ndarray  # L

    @classmethod
    def initialize(cls, num_categories: int, channels: int, rng: np.random.Generator) -> "ObjectClassifier":
        bound = 1.0 / math.sqrt(channels)
        return cls(rng.uniform(-bound, bound, size=(num_categories, channels)), np.zeros(num_categories))

    @property
    def num_categories(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    def parameters(self):
        return {"object.weights": self.weights, "object.bias": self.bias}


@dataclass
class LocalLoss:
    loss: float
    l0: float
    l1: float
    w: float
    grad_probs: Tensor


@dataclass
class ObjectLoss:
    loss: float
    probs: Tensor
    grad_weights: np.ndarray
    grad_bias: np.ndarray
    grad_features: Tensor


@dataclass
class LossBreakdown:
    loc: float
    obj: float
    total: float
    l0: float
    l1: float
    w: float

    def as_dict(self):
        return {"loss": self.total, "loc": self.loc, "obj": self.obj, "l0": self.l0, "l1": self.l1, "w": self.w}


def _check_label(label: int, num_categories: int) -> None:
    if not 0 <= label < num_categories:
        raise RejectedInputError(f"label {label} outside [0, {num_categories})")


def local_loss(agg: AggregatedVolume, mask: np.ndarray, w: float, label: int) -> LocalLoss:
    """Weighted local loss (1/WH)((1-w)·l1 + w·l0).

    l1 sums -log p^t over foreground cells and l0 sums -log p^background over
    the rest. The returned gradient is w.r.t. ``agg.probs``.
    """
    probs = agg.probs
    background = probs.shape[0] - 1
    _check_label(label, background)
    if mask.shape != probs.shape[1:]:
        raise RejectedInputError(f"mask shape {mask.shape} does not match volume {probs.shape}")
    if not 0.0 < w <= 1.0:
        raise RejectedInputError(f"foreground ratio {w} outside (0, 1]")

    cells = mask.size
    fg = mask.astype(bool)
    p_t = np.maximum(probs[label], PROB_FLOOR)
    p_bk = np.maximum(probs[background], PROB_FLOOR)
    l1 = float(-np.log(p_t[fg]).sum())
    l0 = float(-np.log(p_bk[~fg]).sum())
    loss = ((1.0 - w) * l1 + w * l0) / cells

    grad = np.zeros_like(probs)
    live_t = fg & (probs[label] > PROB_FLOOR)
    live_bk = ~fg & (probs[background] > PROB_FLOOR)
    grad[label][live_t] = -(1.0 - w) / (cells * probs[label][live_t])
    grad[background][live_bk] = -w / (cells * probs[background][live_bk])
    return LocalLoss(loss, l0, l1, w, grad)


def object_features(features: Tensor, mask: np.ndarray) -> MaxPoolResult:
    """Max-pool of the mask-weighted feature maps."""
    if features.ndim != 3 or mask.shape != features.shape[1:]:
        raise RejectedInputError(f"mask shape {mask.shape} does not match features {features.shape}")
    return spatial_max_pool(features * mask[None])


def object_features_backward(pooled: MaxPoolResult, mask: np.ndarray, grad_out: Tensor) -> Tensor:
    return spatial_max_pool_backward(pooled, grad_out) * mask[None]


def object_predict(obj_feat: Tensor, clf: ObjectClassifier) -> Tensor:
    """Softmax over the L object-level logits."""
    if obj_feat.shape != (clf.channels,):
        raise RejectedInputError(f"object features {obj_feat.shape} do not match classifier input {clf.channels}")
    logits = clf.weights @ obj_feat + clf.bias
    exp = np.exp(logits - logits.max())
    return exp / exp.sum()


def object_loss(obj_feat: Tensor, clf: ObjectClassifier, label: int) -> ObjectLoss:
    """Negative log softmax probability of ``label`` under the object classifier."""
    _check_label(label, clf.num_categories)
    probs = object_predict(obj_feat, clf)
    p_t = probs[label]
    loss = float(-math.log(max(p_t, PROB_FLOOR)))

    grad_logits = probs.copy()
    grad_logits[label] -= 1.0
    if p_t <= PROB_FLOOR:
        grad_logits[:] = 0.0
    return ObjectLoss(
        loss=loss,
        probs=probs,
        grad_weights=np.outer(grad_logits, obj_feat),
        grad_bias=grad_logits,
        grad_features=clf.weights.T @ grad_logits,
    )


def total_loss(local: LocalLoss, obj: ObjectLoss) -> LossBreakdown:
    return LossBreakdown(
        loc=local.loss,
        obj=obj.loss,
        total=local.loss + obj.loss,
        l0=local.l0,
        l1=local.l1,
        w=local.w,
    )

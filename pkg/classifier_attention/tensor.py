"""
Dense tensor primitives with paired forward/backward functions.

Tensors are plain float64 numpy arrays of rank 1 to 3. Rank-3 arrays are
laid out channel, height, width. Every operation here is pure: it returns
freshly allocated arrays and never mutates its arguments. Backward functions
are the exact analytic adjoints of their forward counterparts, so the
training code composes them layer by layer without an autodiff tape.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Tuple

import numpy as np
import numpy.typing as npt

from .exceptions import RejectedInputError

logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.float64]

PROB_FLOOR = 1e-12


def as_tensor(values, rank: Optional[int] = None) -> Tensor:
    """Convert ``values`` to a float64 tensor, checking its rank.

    Args:
        values: Anything ``np.asarray`` accepts
        rank: Required rank, or None to accept ranks 1 to 3

    Returns:
        Tensor: A float64 array (copied only if a conversion was needed)
    """
    arr = np.asarray(values, dtype=np.float64)
    if rank is not None and arr.ndim != rank:
        raise RejectedInputError(f"expected a rank-{rank} tensor, got shape {arr.shape}")
    if rank is None and not 1 <= arr.ndim <= 3:
        raise RejectedInputError(f"tensors have rank 1 to 3, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class GradPair:
    """A value together with the gradient of a scalar loss w.r.t. it."""
    value: np.ndarray
    grad: np.ndarray

    def __post_init__(self):
        if self.value.shape != self.grad.shape:
            raise RejectedInputError(
                f"gradient shape {self.grad.shape} does not match value shape {self.value.shape}"
            )


class Conv1x1Grads(NamedTuple):
    features: Tensor
    weights: Tensor
    bias: Tensor


class MaxPoolResult(NamedTuple):
    values: Tensor
    argmax: npt.NDArray[np.int64]  # flat spatial index per channel
    spatial_shape: Tuple[int, int]


def _check_conv1x1(features: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> None:
    if features.ndim != 3 or weights.ndim != 2:
        raise RejectedInputError(
            f"conv1x1 expects C×H×W features and K×C weights, got {features.shape} and {weights.shape}"
        )
    if features.shape[0] != weights.shape[1]:
        raise RejectedInputError(
            f"feature channels {features.shape[0]} do not match weight input extent {weights.shape[1]}"
        )
    if bias is not None and bias.shape != (weights.shape[0],):
        raise RejectedInputError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")


def conv1x1_forward(features: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Apply a K×C linear map at every spatial location.

    out[k,i,j] = bias[k] + sum_c weights[k,c] * features[c,i,j]
    """
    _check_conv1x1(features, weights, bias)
    return np.einsum("kc,chw->khw", weights, features) + bias[:, None, None]


def conv1x1_backward(features: Tensor, weights: Tensor, grad_out: Tensor) -> Conv1x1Grads:
    _check_conv1x1(features, weights)
    expected = (weights.shape[0],) + features.shape[1:]
    if grad_out.shape != expected:
        raise RejectedInputError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    return Conv1x1Grads(
        features=np.einsum("kc,khw->chw", weights, grad_out),
        weights=np.einsum("khw,chw->kc", grad_out, features),
        bias=grad_out.sum(axis=(1, 2)),
    )


def softmax_channel(logits: Tensor) -> Tensor:
    """Softmax over the leading (channel) axis, independently per location."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=0, keepdims=True)


def softmax_channel_backward(probs: Tensor, grad_probs: Tensor) -> Tensor:
    """Gradient w.r.t. the logits given the softmax output and its cotangent."""
    inner = (probs * grad_probs).sum(axis=0, keepdims=True)
    return probs * (grad_probs - inner)


def spatial_max_pool(features: Tensor) -> MaxPoolResult:
    """Per-channel maximum over the spatial grid.

    Ties resolve to the first cell in row-major order.
    """
    if features.ndim != 3 or features.shape[1] == 0 or features.shape[2] == 0:
        raise RejectedInputError(f"max pool needs a non-empty C×H×W tensor, got {features.shape}")
    flat = features.reshape(features.shape[0], -1)
    argmax = flat.argmax(axis=1)
    values = flat[np.arange(flat.shape[0]), argmax]
    return MaxPoolResult(values, argmax, features.shape[1:])


def spatial_max_pool_backward(pooled: MaxPoolResult, grad_out: Tensor) -> Tensor:
    channels = pooled.argmax.shape[0]
    h, w = pooled.spatial_shape
    grad = np.zeros((channels, h * w))
    grad[np.arange(channels), pooled.argmax] = grad_out
    return grad.reshape(channels, h, w)


def spatial_avg_pool(volume: Tensor) -> Tensor:
    if volume.ndim != 3 or volume.shape[1] == 0 or volume.shape[2] == 0:
        raise RejectedInputError(f"average pool needs a non-empty K×H×W tensor, got {volume.shape}")
    return volume.mean(axis=(1, 2))


def spatial_avg_pool_backward(grad_out: Tensor, spatial_shape: Tuple[int, int]) -> Tensor:
    h, w = spatial_shape
    return np.broadcast_to(grad_out[:, None, None] / (h * w), (grad_out.shape[0], h, w)).copy()


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    parameter_count: int
    worst_parameter: str = ""
    message: str = ""


def gradient_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` is re-evaluated after perturbing each entry of each array in
    ``params`` in place (the entry is restored afterwards). The relative error
    of a parameter is ||analytic - numeric|| / max(||analytic||, ||numeric||),
    and parameters whose gradients are both below 1e-10 in norm count as exact.

    Args:
        loss_fn: Zero-argument callable returning the scalar loss
        params: Named parameter arrays, perturbed in place
        grads: Analytic gradients keyed like ``params``
        step: Finite-difference step, within [1e-8, 1e-4]
        tolerance: Largest accepted relative error

    Returns:
        GradCheckReport: Worst relative error and pass/fail verdict
    """
    if not 1e-8 <= step <= 1e-4:
        raise RejectedInputError(f"finite-difference step {step} outside [1e-8, 1e-4]")
    if set(params) != set(grads):
        raise RejectedInputError("params and grads must have identical keys")

    worst, worst_name, count = 0.0, "", 0
    for name, param in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != param.shape:
            raise RejectedInputError(f"gradient for '{name}' has shape {analytic.shape}, expected {param.shape}")
        numeric = np.zeros_like(analytic)
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + step
            plus = loss_fn()
            param[idx] = original - step
            minus = loss_fn()
            param[idx] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                message = f"non-finite loss while perturbing {name}{list(idx)}"
                logger.warning("Gradient check aborted: %s", message)
                return GradCheckReport(math.inf, False, count, name, message)
            numeric[idx] = (plus - minus) / (2.0 * step)
            count += 1
        if not np.all(np.isfinite(analytic)):
            message = f"non-finite analytic gradient for {name}"
            logger.warning("Gradient check aborted: %s", message)
            return GradCheckReport(math.inf, False, count, name, message)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        rel = 0.0 if scale < 1e-10 else float(np.linalg.norm(analytic - numeric) / scale)
        if rel > worst:
            worst, worst_name = rel, name

    passed = worst <= tolerance
    if not passed:
        logger.warning("Gradient check failed: %s has relative error %.3e", worst_name, worst)
    return GradCheckReport(worst, passed, count, worst_name)

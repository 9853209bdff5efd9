"""
Multi-scale recognition.

Each scale owns an independent backbone, local classifier bank and object
classifier. Scale 1 sees the original image; every following scale sees the
region attended by the previous scale, cropped and zoomed back to the working
resolution. Scales are trained one after another, each on its own objective,
and at test time their predictions are averaged.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attention import (
    AttentionArtifacts,
    BBox,
    LocalClassifierBank,
    LocalForward,
    compute_attention,
    local_backward,
    local_forward,
)
from .backbone import BackboneCache, IdentityBackbone, ToyBackbone
from .config import RunConfig
from .data import LabeledImage
from .exceptions import RejectedInputError, TrainingDivergedError
from .imaging import bilinear_resize
from .losses import (
    LossBreakdown,
    ObjectClassifier,
    local_loss,
    object_features,
    object_features_backward,
    object_loss,
    object_predict,
    total_loss,
)
from .tensor import GradPair, MaxPoolResult, Tensor, spatial_avg_pool

logger = logging.getLogger(__name__)


@dataclass
class ScaleModel:
    backbone: object  # ToyBackbone or IdentityBackbone
    bank: LocalClassifierBank
    object_clf: ObjectClassifier
    scale_index: int = 0

    def __post_init__(self):
        channels = self.backbone.out_channels
        if self.bank.channels != channels or self.object_clf.channels != channels:
            raise RejectedInputError(
                f"channel mismatch: backbone {channels}, bank {self.bank.channels}, object {self.object_clf.channels}"
            )
        if self.bank.num_categories != self.object_clf.num_categories:
            raise RejectedInputError("bank and object classifier disagree on the category count")

    @classmethod
    def initialize(cls, backbone, config: RunConfig, rng: np.random.Generator, scale_index: int = 0) -> "ScaleModel":
        channels = backbone.out_channels
        return cls(
            backbone=backbone,
            bank=LocalClassifierBank.initialize(config.n_classifiers, config.categories, channels, rng),
            object_clf=ObjectClassifier.initialize(config.categories, channels, rng),
            scale_index=scale_index,
        )

    @property
    def num_categories(self) -> int:
        return self.bank.num_categories

    def parameters(self) -> Dict[str, np.ndarray]:
        params = dict(self.backbone.parameters())
        params.update(self.bank.parameters())
        params.update(self.object_clf.parameters())
        return params

    def mark_updated(self) -> None:
        self.backbone.mark_updated()


@dataclass
class MultiScaleModel:
    scales: List[ScaleModel]

    def __post_init__(self):
        if not self.scales:
            raise RejectedInputError("a multi-scale model needs at least one scale")

    @property
    def num_categories(self) -> int:
        return self.scales[0].num_categories


@dataclass
class ScaleOutput:
    prediction: Tensor
    local_prediction: Tensor
    object_prediction: Tensor
    artifacts: AttentionArtifacts
    image: Tensor
    features: Tensor = field(repr=False)
    backbone_cache: BackboneCache = field(repr=False)
    local: LocalForward = field(repr=False)
    pooled: MaxPoolResult = field(repr=False)


@dataclass
class Crop:
    image: Tensor
    source: BBox  # inclusive rows/cols in the source image
    fell_back: bool


@dataclass
class CropRecord:
    sample_index: int
    scale: int  # 1-based index of the scale that consumes the crop
    source: BBox
    source_shape: Tuple[int, int]
    fell_back: bool


@dataclass
class TrainedPipeline:
    model: MultiScaleModel
    crop_log: List[CropRecord]


@dataclass
class Prediction:
    final: Tensor
    label: int
    per_scale: List[ScaleOutput]

    @property
    def scale_predictions(self) -> List[Tensor]:
        return [out.prediction for out in self.per_scale]


def ensemble_mean(vectors: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean accumulated in list order."""
    total = np.zeros_like(vectors[0])
    for v in vectors:
        total = total + v
    return total / len(vectors)


def argmax_label(vector: Tensor) -> int:
    return int(np.argmax(vector))


def feature_box_to_image(bbox: BBox, stride: int, height: int, width: int) -> Optional[BBox]:
    """Map a feature-grid box to image pixels; None when nothing survives clipping."""
    row0, col0 = bbox.row0 * stride, bbox.col0 * stride
    if row0 > height - 1 or col0 > width - 1:
        return None
    return BBox(row0, col0, min((bbox.row1 + 1) * stride - 1, height - 1), min((bbox.col1 + 1) * stride - 1, width - 1))


def crop_and_zoom(image: Tensor, bbox: BBox, stride: int, out_h: int, out_w: int) -> Crop:
    """Cut the image region under a feature-grid box and resize it bilinearly.

    Each feature cell covers a stride×stride block of pixels. A crop that is
    empty after clipping falls back to the whole image.
    """
    if out_h < stride or out_w < stride:
        raise RejectedInputError(f"output {out_h}×{out_w} is smaller than the backbone stride {stride}")
    _, h, w = image.shape
    source = feature_box_to_image(bbox, stride, h, w)
    fell_back = source is None
    if fell_back:
        logger.warning("Empty crop for box %s on a %dx%d image; using the full image", tuple(bbox), h, w)
        source = BBox(0, 0, h - 1, w - 1)
    region = image[:, source.row0:source.row1 + 1, source.col0:source.col1 + 1]
    return Crop(bilinear_resize(region, out_h, out_w), source, fell_back)


def scale_forward(model: ScaleModel, image: Tensor, config: RunConfig) -> ScaleOutput:
    """Run one scale: attention artifacts plus local, object and averaged predictions."""
    features, cache = model.backbone.forward(image)
    local = local_forward(features, model.bank, config.aggregate_on)
    artifacts = compute_attention(local.agg, config.otsu_bins, config.margin_fraction)
    pooled = object_features(features, artifacts.mask)
    local_prediction = spatial_avg_pool(local.agg.probs)[:-1]
    object_prediction = object_predict(pooled.values, model.object_clf)
    return ScaleOutput(
        prediction=(local_prediction + object_prediction) / 2.0,
        local_prediction=local_prediction,
        object_prediction=object_prediction,
        artifacts=artifacts,
        image=image,
        features=features,
        backbone_cache=cache,
        local=local,
        pooled=pooled,
    )


def sample_gradients(model: ScaleModel, image: Tensor, label: int, config: RunConfig) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Loss breakdown and gradients of every trainable parameter for one image.

    ``config.loss_terms`` selects which of the two losses send gradients; the
    other branch receives zeros.
    """
    out = scale_forward(model, image, config)
    mask = out.artifacts.mask
    loc = local_loss(out.local.agg, mask, out.artifacts.foreground_ratio, label)
    obj = object_loss(out.pooled.values, model.object_clf, label)
    breakdown = total_loss(loc, obj)

    grads = {name: np.zeros_like(p) for name, p in model.parameters().items()}
    grad_features = np.zeros_like(out.features)
    if config.loss_terms in ("both", "local"):
        grad_w, grad_b, grad_f = local_backward(out.local, model.bank, loc.grad_probs)
        grads["bank.weights"], grads["bank.bias"] = grad_w, grad_b
        grad_features += grad_f
    if config.loss_terms in ("both", "object"):
        grads["object.weights"], grads["object.bias"] = obj.grad_weights, obj.grad_bias
        grad_features += object_features_backward(out.pooled, mask, obj.grad_features)
    grads.update(model.backbone.backward(out.backbone_cache, grad_features).params)
    return breakdown, grads


class SGDMomentum:
    """Heavy-ball SGD: v = momentum·v + g, p -= lr·v, updating arrays in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, pairs: Dict[str, GradPair]) -> None:
        for name, pair in pairs.items():
            v = self.velocity[name]
            v *= self.momentum
            v += pair.grad
            # GradPair is frozen; write through the array, not the attribute.
            np.subtract(pair.value, self.lr * v, out=pair.value)


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear learning-rate ramp: (step+1)/warmup_steps, then 1."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping; ``max_norm = 0`` disables clipping.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    count = len(parts)
    return LossBreakdown(
        loc=sum(p.loc for p in parts) / count,
        obj=sum(p.obj for p in parts) / count,
        total=sum(p.total for p in parts) / count,
        l0=sum(p.l0 for p in parts) / count,
        l1=sum(p.l1 for p in parts) / count,
        w=sum(p.w for p in parts) / count,
    )


def batch_loss(model: ScaleModel, samples: Sequence[LabeledImage], config: RunConfig) -> LossBreakdown:
    """Mean loss breakdown over ``samples`` without updating anything."""
    parts = []
    for s in samples:
        out = scale_forward(model, s.image, config)
        loc = local_loss(out.local.agg, out.artifacts.mask, out.artifacts.foreground_ratio, s.label)
        obj = object_loss(out.pooled.values, model.object_clf, s.label)
        parts.append(total_loss(loc, obj))
    return _mean_breakdown(parts)


def make_backbone(samples: Sequence[LabeledImage], config: RunConfig, rng: np.random.Generator):
    """ToyBackbone for images, IdentityBackbone for precomputed feature maps."""
    if samples and samples[0].path.endswith(".fmap"):
        return IdentityBackbone(samples[0].image.shape[0])
    widths = (3,) + tuple(config.backbone_widths)
    return ToyBackbone.initialize(widths, rng, frozen=config.freeze_backbone)


def initialize_scale(samples: Sequence[LabeledImage], config: RunConfig, seed: int, scale_index: int = 0) -> Tuple[ScaleModel, np.random.Generator]:
    init_seq, shuffle_seq = np.random.SeedSequence([seed, scale_index]).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    model = ScaleModel.initialize(make_backbone(samples, config, init_rng), config, init_rng, scale_index)
    return model, np.random.default_rng(shuffle_seq)


def train_scale(samples: Sequence[LabeledImage], config: RunConfig, seed: int, scale_index: int = 0) -> ScaleModel:
    """Minimize the combined loss of one scale with mini-batch SGD + momentum.

    The surrogate mask and foreground ratio are recomputed for every image at
    every step. Per-image gradients are summed in batch order and averaged,
    so a fixed seed gives bit-identical weights. The batch gradient is clipped
    to ``config.grad_clip`` and the learning rate ramps up linearly over the
    first ``config.warmup_epochs`` epochs.

    Args:
        samples: Training images at this scale's resolution
        config: Run configuration
        seed: Seed for initialization and the shuffle schedule
        scale_index: 0-based scale, mixed into the seed

    Returns:
        ScaleModel: The trained model
    """
    if not samples:
        raise RejectedInputError("cannot train on an empty dataset")
    for s in samples:
        if not 0 <= s.label < config.categories:
            raise RejectedInputError(f"label {s.label} of {s.path} outside [0, {config.categories})")

    model, shuffle_rng = initialize_scale(samples, config, seed, scale_index)
    params = model.parameters()
    optimizer = SGDMomentum(params, config.lr, config.momentum)
    batches_per_epoch = math.ceil(len(samples) / config.batch_size)
    warmup_steps = config.warmup_epochs * batches_per_epoch
    step = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(samples))
        epoch_parts = []
        for batch_index, start in enumerate(range(0, len(samples), config.batch_size)):
            batch = order[start:start + config.batch_size]
            summed = {name: np.zeros_like(p) for name, p in params.items()}
            for idx in batch:
                breakdown, grads = sample_gradients(model, samples[idx].image, samples[idx].label, config)
                if not math.isfinite(breakdown.total):
                    raise TrainingDivergedError(
                        "non-finite loss",
                        {"scale": scale_index + 1, "epoch": epoch + 1, "batch": batch_index + 1, **breakdown.as_dict()},
                    )
                for name in summed:
                    summed[name] += grads[name]
                epoch_parts.append(breakdown)
            mean_grads = {name: g / len(batch) for name, g in summed.items()}
            clip_grad_norm(mean_grads, config.grad_clip)
            optimizer.lr = config.lr * warmup_factor(step, warmup_steps)
            optimizer.step({name: GradPair(params[name], g) for name, g in mean_grads.items()})
            model.mark_updated()
            step += 1
        mean = _mean_breakdown(epoch_parts)
        logger.info(
            "scale %d epoch %d/%d: loss %.4f (loc %.4f, obj %.4f, w %.3f)",
            scale_index + 1, epoch + 1, config.epochs, mean.total, mean.loc, mean.obj, mean.w,
        )
    return model


def next_scale_samples(model: ScaleModel, samples: Sequence[LabeledImage], config: RunConfig, scale: int) -> Tuple[List[LabeledImage], List[CropRecord]]:
    """Crop every sample to the region ``model`` attends and zoom it back up."""
    cropped, log = [], []
    for i, s in enumerate(samples):
        out = scale_forward(model, s.image, config)
        _, h, w = s.image.shape
        crop = crop_and_zoom(s.image, out.artifacts.bbox, model.backbone.stride, h, w)
        cropped.append(LabeledImage(crop.image, s.label, None, s.path))
        log.append(CropRecord(i, scale, crop.source, (h, w), crop.fell_back))
    return cropped, log


def train_pipeline(samples: Sequence[LabeledImage], config: RunConfig, seed: int) -> TrainedPipeline:
    """Train ``config.scales`` scales in sequence, each on the previous one's crops."""
    scales, crop_log = [], []
    current = list(samples)
    for s in range(config.scales):
        if s > 0:
            current, log = next_scale_samples(scales[-1], current, config, scale=s + 1)
            crop_log.extend(log)
            logger.info("Built %d crops for scale %d", len(current), s + 1)
        scales.append(train_scale(current, config, seed, scale_index=s))
    return TrainedPipeline(MultiScaleModel(scales), crop_log)


def predict(model: MultiScaleModel, image: Tensor, config: RunConfig) -> Prediction:
    """Run every scale in turn and average the per-scale predictions."""
    outputs = []
    _, h, w = image.shape
    for i, scale in enumerate(model.scales):
        out = scale_forward(scale, image, config)
        outputs.append(out)
        if i + 1 < len(model.scales):
            image = crop_and_zoom(image, out.artifacts.bbox, scale.backbone.stride, h, w).image
    final = ensemble_mean([o.prediction for o in outputs])
    return Prediction(final=final, label=argmax_label(final), per_scale=outputs)

"""
Metrics, experiment harnesses and attention visualization.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import BBox, mask_to_bbox
from .config import RunConfig, parse_run_config
from .data import LabeledImage
from .exceptions import FormatError, RejectedInputError
from .formats.netpbm import as_rgb, write_image
from .imaging import bilinear_resize
from .multiscale import (
    MultiScaleModel,
    argmax_label,
    ensemble_mean,
    feature_box_to_image,
    predict,
    scale_forward,
    train_pipeline,
)
from .tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

METRICS = ("acc_loc", "acc_obj", "acc_avg")


def accuracy(predictions: Sequence[Tensor], labels: Sequence[int]) -> float:
    """Fraction of predictions whose argmax (lowest index on ties) equals the label."""
    if len(predictions) == 0 or len(predictions) != len(labels):
        raise RejectedInputError(
            f"accuracy needs equal, non-zero lengths, got {len(predictions)} predictions and {len(labels)} labels"
        )
    correct = sum(argmax_label(p) == int(t) for p, t in zip(predictions, labels))
    return correct / len(labels)


def iou(box_a: BBox, box_b: BBox) -> float:
    """Intersection over union with inclusive pixel-count semantics."""
    for box in (box_a, box_b):
        if box.row1 < box.row0 or box.col1 < box.col0:
            raise RejectedInputError(f"malformed box {tuple(box)}")
    rows = min(box_a.row1, box_b.row1) - max(box_a.row0, box_b.row0) + 1
    cols = min(box_a.col1, box_b.col1) - max(box_a.col0, box_b.col0) + 1
    inter = max(rows, 0) * max(cols, 0)
    return inter / (box_a.area + box_b.area - inter)


@dataclass
class AttentionIoU:
    mean_iou: float
    baseline_iou: float
    per_image: List[float] = field(default_factory=list)


def _attended_box(scale_output, stride: int) -> BBox:
    feature_box = mask_to_bbox(scale_output.artifacts.mask, margin_fraction=0.0)
    _, h, w = scale_output.image.shape
    return feature_box_to_image(feature_box, stride, h, w)


def _random_box_like(box: BBox, height: int, width: int, rng: np.random.Generator) -> BBox:
    top = int(rng.integers(0, height - box.height + 1))
    left = int(rng.integers(0, width - box.width + 1))
    return BBox(top, left, top + box.height - 1, left + box.width - 1)


def _iou_summary(attended: Sequence[BBox], samples: Sequence[LabeledImage], seed: int) -> AttentionIoU:
    rng = np.random.default_rng(seed)
    scores, baseline = [], []
    for box, s in zip(attended, samples):
        if s.box is None:
            raise RejectedInputError(f"{s.path} has no ground-truth box")
        _, h, w = s.image.shape
        scores.append(iou(box, s.box))
        baseline.append(iou(_random_box_like(box, h, w, rng), s.box))
    return AttentionIoU(float(np.mean(scores)), float(np.mean(baseline)), scores)


def attention_iou(model: MultiScaleModel, samples: Sequence[LabeledImage], config: RunConfig, seed: Optional[int] = None) -> AttentionIoU:
    """Mean IOU of the scale-1 attended box against the ground-truth box.

    The attended box encloses the scale-1 binary mask with no margin and is
    mapped to pixels through the backbone stride. The baseline places a box of
    the same extents uniformly at random, from a generator seeded by ``seed``.
    """
    if not samples:
        raise RejectedInputError("attention_iou needs at least one sample")
    first = model.scales[0]
    attended = [_attended_box(scale_forward(first, s.image, config), first.backbone.stride) for s in samples]
    return _iou_summary(attended, samples, config.seed if seed is None else seed)


@dataclass
class EvalReport:
    """Per-scale accuracies: one column per scale plus the ensemble ("ms")."""
    scales: int
    acc_loc: List[float]
    acc_obj: List[float]
    acc_avg: List[float]
    mean_iou: float
    baseline_iou: float
    seed: int
    samples: int
    config_text: str
    runtime: float = 0.0

    def rows(self) -> Dict[str, List[float]]:
        return {"acc_loc": self.acc_loc, "acc_obj": self.acc_obj, "acc_avg": self.acc_avg}

    @property
    def multi_scale_accuracy(self) -> float:
        return self.acc_avg[-1]


def evaluate(model: MultiScaleModel, samples: Sequence[LabeledImage], config: RunConfig) -> EvalReport:
    """Per-scale and ensemble accuracies, plus the scale-1 attention IOU."""
    if not samples:
        raise RejectedInputError("cannot evaluate on an empty dataset")
    started = time.perf_counter()
    count = len(model.scales)
    local = [[] for _ in range(count + 1)]
    obj = [[] for _ in range(count + 1)]
    avg = [[] for _ in range(count + 1)]
    attended = []
    for s in samples:
        result = predict(model, s.image, config)
        for i, out in enumerate(result.per_scale):
            local[i].append(out.local_prediction)
            obj[i].append(out.object_prediction)
            avg[i].append(out.prediction)
        local[count].append(ensemble_mean([o.local_prediction for o in result.per_scale]))
        obj[count].append(ensemble_mean([o.object_prediction for o in result.per_scale]))
        avg[count].append(result.final)
        attended.append(_attended_box(result.per_scale[0], model.scales[0].backbone.stride))

    labels = [s.label for s in samples]
    has_boxes = all(s.box is not None for s in samples)
    ious = _iou_summary(attended, samples, config.seed) if has_boxes else AttentionIoU(float("nan"), float("nan"))
    report = EvalReport(
        scales=count,
        acc_loc=[accuracy(p, labels) for p in local],
        acc_obj=[accuracy(p, labels) for p in obj],
        acc_avg=[accuracy(p, labels) for p in avg],
        mean_iou=ious.mean_iou,
        baseline_iou=ious.baseline_iou,
        seed=config.seed,
        samples=len(samples),
        config_text=config.to_text(),
        runtime=time.perf_counter() - started,
    )
    logger.info(
        "Evaluated %d samples in %.1fs: ms accuracy %.4f, attention IOU %.4f (random %.4f)",
        len(samples), report.runtime, report.multi_scale_accuracy, report.mean_iou, report.baseline_iou,
    )
    return report


def _columns(scales: int) -> List[str]:
    return [f"scale_{i + 1}" for i in range(scales)] + ["ms"]


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> None:
    """Write ``report.csv`` (one row per metric, one column per scale) and ``summary.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric"] + _columns(report.scales))
        for name, values in report.rows().items():
            writer.writerow([name] + [repr(float(v)) for v in values])
    summary = [
        f"mean_iou = {float(report.mean_iou)!r}",
        f"baseline_iou = {float(report.baseline_iou)!r}",
        f"seed = {report.seed}",
        f"samples = {report.samples}",
        "[config]",
        report.config_text.rstrip("\n"),
    ]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")


def read_report(out_dir: Union[str, Path]) -> EvalReport:
    out = Path(out_dir)
    with open(out / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "metric" or rows[0][-1] != "ms":
        raise FormatError("report.csv has an unexpected header", field="header")
    scales = len(rows[0]) - 2
    table = {row[0]: [float(v) for v in row[1:]] for row in rows[1:]}
    if set(table) != set(METRICS):
        raise FormatError("report.csv must hold acc_loc, acc_obj and acc_avg rows", field="metric")

    head, _, config_text = (out / "summary.txt").read_text().partition("[config]\n")
    fields = dict(line.split(" = ", 1) for line in head.splitlines() if " = " in line)
    return EvalReport(
        scales=scales,
        acc_loc=table["acc_loc"],
        acc_obj=table["acc_obj"],
        acc_avg=table["acc_avg"],
        mean_iou=float(fields["mean_iou"]),
        baseline_iou=float(fields["baseline_iou"]),
        seed=int(fields["seed"]),
        samples=int(fields["samples"]),
        config_text=parse_run_config(config_text).to_text(),
    )


def write_table(path: Union[str, Path], header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _ms_accuracy(train: Sequence[LabeledImage], test: Sequence[LabeledImage], config: RunConfig) -> Tuple[float, MultiScaleModel]:
    model = train_pipeline(train, config, config.seed).model
    predictions = [predict(model, s.image, config).final for s in test]
    return accuracy(predictions, [s.label for s in test]), model


def ablate_losses(train: Sequence[LabeledImage], test: Sequence[LabeledImage], config: RunConfig) -> List[Tuple[str, float]]:
    """Accuracy when training with the local loss only, the object loss only, and both."""
    rows = []
    for terms in ("local", "object", "both"):
        acc, _ = _ms_accuracy(train, test, config.replace(loss_terms=terms))
        logger.info("loss ablation %s: accuracy %.4f", terms, acc)
        rows.append((terms, acc))
    return rows


def ablate_num_classifiers(
    train: Sequence[LabeledImage], test: Sequence[LabeledImage], config: RunConfig, n_list: Optional[Sequence[int]] = None
) -> List[Tuple[int, float]]:
    """Accuracy as a function of the number of local classifiers."""
    n_list = list(config.nclf_list if n_list is None else n_list)
    if not n_list:
        raise RejectedInputError("n_list must not be empty")
    rows = []
    for n in n_list:
        acc, _ = _ms_accuracy(train, test, config.replace(n_classifiers=n))
        logger.info("classifier-count ablation n=%d: accuracy %.4f", n, acc)
        rows.append((n, acc))
    return rows


def ablate_scales(model: MultiScaleModel, samples: Sequence[LabeledImage], config: RunConfig) -> List[Tuple[int, float]]:
    """Accuracy of the ensemble of the first k scales, for k = 1..S."""
    per_sample = [predict(model, s.image, config).scale_predictions for s in samples]
    labels = [s.label for s in samples]
    rows = []
    for k in range(1, len(model.scales) + 1):
        rows.append((k, accuracy([ensemble_mean(p[:k]) for p in per_sample], labels)))
    return rows


def export_heatmap(image: Tensor, attention: Tensor, prefix: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<prefix>_raw.pgm`` and ``<prefix>_overlay.ppm``.

    The raw map is min-max normalized (a constant map becomes mid-gray 128)
    and upsampled to the image extents. The overlay mixes the image half and
    half with a red heat channel holding the attention values.
    """
    image = as_tensor(image, rank=3)
    attention = as_tensor(attention)
    if not np.all(np.isfinite(attention)):
        raise RejectedInputError("attention map has non-finite values")
    amap = attention.reshape((1,) + attention.shape[-2:])
    _, h, w = image.shape
    lo, hi = float(amap.min()), float(amap.max())
    if hi - lo < 1e-12:
        gray = np.full((1, h, w), 128.0 / 255.0)
    else:
        gray = bilinear_resize((amap - lo) / (hi - lo), h, w)

    heat = np.zeros((3, h, w))
    heat[0] = np.clip(bilinear_resize(amap, h, w)[0], 0.0, 1.0)
    overlay = 0.5 * as_rgb(image) + 0.5 * heat

    raw_path = Path(f"{prefix}_raw.pgm")
    overlay_path = Path(f"{prefix}_overlay.ppm")
    write_image(raw_path, gray)
    write_image(overlay_path, overlay)
    return raw_path, overlay_path

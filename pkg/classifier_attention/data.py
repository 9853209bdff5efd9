"""
Synthetic fine-grained dataset and dataset loading.

Every synthetic image is band-limited clutter with one category-specific
patch pasted at a random position. The patch is an oriented sinusoidal
texture whose orientation encodes the category, so the discriminative region
of every image is known exactly and recorded in the manifest.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .attention import BBox
from .config import RunConfig
from .exceptions import ConfigError, RejectedInputError
from .formats.feature_maps import read_feature_maps
from .formats.manifest import SampleRecord, read_manifest, write_manifest
from .formats.netpbm import as_rgb, read_image, write_image
from .imaging import bilinear_resize, short_edge_shape
from .tensor import Tensor

logger = logging.getLogger(__name__)

PATCH_PERIOD = 4.0  # pixels per texture cycle
CLUTTER_CELL = 8  # pixels per clutter control point
BACKGROUND_LEVEL = 0.5
SPLITS = {"train": 0, "test": 1}
# SynthConfig fields named differently in RunConfig
SYNTH_KEYS = {"height": "image_size", "width": "image_size"}


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    categories: int = Field(4, ge=2)
    train_per_class: int = Field(50, ge=0)
    test_per_class: int = Field(50, ge=0)
    height: int = Field(64, ge=2)
    width: int = Field(64, ge=2)
    patch_size: int = Field(16, ge=1)
    clutter: float = Field(0.3, ge=0.0, le=1.0)
    seed: int = Field(42, ge=0)

    @model_validator(mode="after")
    def _patch_fits(self):
        if self.patch_size >= min(self.height, self.width):
            raise ValueError("patch_size must be smaller than the image extents")
        return self

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "SynthConfig":
        try:
            return cls(
                categories=config.categories,
                train_per_class=config.train_per_class,
                test_per_class=config.test_per_class,
                height=config.image_size,
                width=config.image_size,
                patch_size=config.patch_size,
                clutter=config.clutter,
                seed=config.seed,
            )
        except ValidationError as e:
            error = e.errors()[0]
            field = str(error["loc"][0]) if error["loc"] else "patch_size"
            raise ConfigError(error["msg"], key=SYNTH_KEYS.get(field, field))


@dataclass
class SynthDataset:
    root: Path
    train: List[SampleRecord]
    test: List[SampleRecord]


@dataclass
class LabeledImage:
    image: Tensor
    label: int
    box: Optional[BBox]  # ground-truth region in image pixels; None for derived crops
    path: str


def category_patch(category: int, categories: int, size: int) -> np.ndarray:
    """Oriented sinusoid with orientation category·π/L, values in [0, 1]."""
    theta = category * math.pi / categories
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = 2.0 * math.pi * (x * math.cos(theta) + y * math.sin(theta)) / PATCH_PERIOD
    return 0.5 + 0.5 * np.sin(phase)


def clutter_background(rng: np.random.Generator, height: int, width: int, amplitude: float) -> np.ndarray:
    """Smooth noise: a coarse random grid bilinearly upsampled to full size."""
    coarse = rng.uniform(-1.0, 1.0, size=(3, height // CLUTTER_CELL + 2, width // CLUTTER_CELL + 2))
    return BACKGROUND_LEVEL + amplitude * bilinear_resize(coarse, height, width)


def synth_image(config: SynthConfig, category: int, rng: np.random.Generator):
    """Render one image; returns (3×H×W image, inclusive patch box)."""
    image = clutter_background(rng, config.height, config.width, config.clutter)
    size = config.patch_size
    top = int(rng.integers(0, config.height - size + 1))
    left = int(rng.integers(0, config.width - size + 1))
    image[:, top:top + size, left:left + size] = category_patch(category, config.categories, size)
    return np.clip(image, 0.0, 1.0), BBox(top, left, top + size - 1, left + size - 1)


def synth_generate(config: SynthConfig, out_dir: Union[str, Path]) -> SynthDataset:
    """Write train/test images and manifests under ``out_dir``.

    Each image draws from its own generator seeded by (seed, split, index), so
    the splits never share random draws and generation is order-independent.
    """
    root = Path(out_dir)
    splits = {}
    for split, split_id in SPLITS.items():
        per_class = config.train_per_class if split == "train" else config.test_per_class
        (root / split).mkdir(parents=True, exist_ok=True)
        records = []
        for category in range(config.categories):
            for j in range(per_class):
                index = category * per_class + j
                rng = np.random.default_rng([config.seed, split_id, index])
                image, box = synth_image(config, category, rng)
                rel = f"{split}/img_{index:05d}.ppm"
                write_image(root / rel, image)
                records.append(SampleRecord(rel, category, box.col0, box.row0, box.col1, box.row1))
        write_manifest(root / f"{split}.csv", records)
        splits[split] = records
        logger.info("Generated %d %s images in %s", len(records), split, root / split)
    return SynthDataset(root, splits["train"], splits["test"])


def load_sample(root: Union[str, Path], record: SampleRecord, image_size: int) -> LabeledImage:
    """Load one manifest row; images are resized so their short edge is ``image_size``.

    ``.fmap`` rows load precomputed feature maps unchanged.
    """
    path = Path(root) / record.path
    box = BBox(record.y0, record.x0, record.y1, record.x1)
    if path.suffix == ".fmap":
        return LabeledImage(read_feature_maps(path), record.label, box, record.path)

    image = as_rgb(read_image(path))
    _, h, w = image.shape
    out_h, out_w = short_edge_shape(h, w, image_size)
    if (out_h, out_w) != (h, w):
        image = bilinear_resize(image, out_h, out_w)
        sy, sx = out_h / h, out_w / w
        box = BBox(
            math.floor(box.row0 * sy), math.floor(box.col0 * sx),
            min(math.ceil((box.row1 + 1) * sy) - 1, out_h - 1),
            min(math.ceil((box.col1 + 1) * sx) - 1, out_w - 1),
        )
    return LabeledImage(image, record.label, box, record.path)


def load_split(root: Union[str, Path], split: str, image_size: int) -> List[LabeledImage]:
    records = read_manifest(Path(root) / f"{split}.csv")
    if not records:
        raise RejectedInputError(f"the {split} split under {root} is empty")
    return [load_sample(root, r, image_size) for r in records]


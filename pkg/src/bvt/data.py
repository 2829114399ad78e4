"""Dataset ingestion and the deterministic synthetic proxy task.

The synthetic task renders one colored shape (disc, ring, or wedge) per image
on a textured gray background. Class identity is carried by shape + hue, so a
model that solves the task has to look at the shape region; the generator
emits the exact shape mask next to every image, which turns saliency quality
into a measurable number (mass inside the mask).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .models import encode_six_channel
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm, write_ppm

SHAPE_KINDS = ("disc", "ring", "wedge")
SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed dataset input; carries the full row-level error report."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("dataset errors:\n" + "\n".join(self.errors))


@dataclass
class SyntheticClass:
    name: str
    shape: str
    color: tuple[float, float, float]
    texture: float = 0.05  # background/foreground noise amplitude

    def __post_init__(self):
        if self.shape not in SHAPE_KINDS:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPE_KINDS}")


@dataclass
class SyntheticSpec:
    seed: int
    image_size: int
    classes: list[SyntheticClass]
    samples_per_class: list[int]
    train_fraction: float = 0.70
    val_fraction: float = 0.15

    def __post_init__(self):
        if len(self.classes) != len(self.samples_per_class):
            raise ValueError("classes and samples_per_class lengths differ")
        if any(n < 1 for n in self.samples_per_class):
            raise ValueError("every class needs at least one sample")
        if not 0 < self.train_fraction < 1 or self.train_fraction + self.val_fraction >= 1:
            raise ValueError("split fractions must leave room for train/val/test")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_size": self.image_size,
            "classes": [
                {"name": c.name, "shape": c.shape, "color": list(c.color), "texture": c.texture}
                for c in self.classes
            ],
            "samples_per_class": list(self.samples_per_class),
            "train_fraction": self.train_fraction,
            "val_fraction": self.val_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {"seed", "image_size", "classes", "samples_per_class", "train_fraction", "val_fraction"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        classes = [SyntheticClass(c["name"], c["shape"], tuple(c["color"]), c.get("texture", 0.05))
                   for c in d["classes"]]
        return cls(seed=d["seed"], image_size=d["image_size"], classes=classes,
                   samples_per_class=list(d["samples_per_class"]),
                   train_fraction=d.get("train_fraction", 0.70),
                   val_fraction=d.get("val_fraction", 0.15))


def default_synthetic_spec(seed: int = 0, image_size: int = 32,
                           samples_per_class=(64, 64, 64)) -> SyntheticSpec:
    classes = [
        SyntheticClass("disc", "disc", (0.85, 0.20, 0.20)),
        SyntheticClass("ring", "ring", (0.20, 0.80, 0.30)),
        SyntheticClass("wedge", "wedge", (0.25, 0.35, 0.90)),
    ]
    return SyntheticSpec(seed=seed, image_size=image_size, classes=classes,
                         samples_per_class=list(samples_per_class))


@dataclass
class Dataset:
    """Images in [0,1] (already 8-bit quantized), labels, splits, optional masks."""

    images: np.ndarray            # [N, 3, H, W] float64
    labels: np.ndarray            # [N] int
    splits: list[str]             # per sample: train | val | test
    class_names: list[str]
    masks: np.ndarray | None = None   # [N, H, W] bool
    paths: list[str] | None = None
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape[0] != n or len(self.splits) != n:
            raise ValueError("images/labels/splits lengths disagree")
        k = len(self.class_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels outside [0, {k})")
        train_classes = {int(l) for l, s in zip(self.labels, self.splits) if s == "train"}
        if n and train_classes != set(range(k)):
            missing = sorted(set(range(k)) - train_classes)
            raise ValueError(f"classes missing from train split: {missing}")

    def __len__(self):
        return len(self.labels)

    @property
    def imbalance_ratio(self) -> float:
        counts = np.bincount(self.labels, minlength=len(self.class_names))
        if counts.min() == 0:
            return float("inf")
        return float(counts.max() / counts.min())

    def split_indices(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.splits) if s == split], dtype=int)

    def split_arrays(self, split: str):
        idx = self.split_indices(split)
        masks = self.masks[idx] if self.masks is not None else None
        return self.images[idx], self.labels[idx], masks


def split_of_index(index: int, total: int, train_fraction: float, val_fraction: float) -> str:
    """Deterministic stratified split: position within the class decides."""
    n_train = max(1, int(math.floor(total * train_fraction)))
    n_val = int(math.floor(total * val_fraction))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def _render_sample(spec: SyntheticSpec, class_index: int, index: int):
    """Pure function of (spec, class, index) -> (image [3,H,W] in [0,1], mask [H,W])."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, class_index, index]))
    size = spec.image_size
    cls = spec.classes[class_index]
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5

    cx = rng.uniform(0.35, 0.65) * size
    cy = rng.uniform(0.35, 0.65) * size
    radius = rng.uniform(0.28, 0.40) * size
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    if cls.shape == "disc":
        mask = d2 <= radius ** 2
    elif cls.shape == "ring":
        inner = 0.55 * radius
        mask = (d2 <= radius ** 2) & (d2 >= inner ** 2)
    else:  # wedge
        theta0 = rng.uniform(0, 2 * math.pi)
        span = rng.uniform(1.9, 2.6)  # radians, just over a quarter turn
        ang = np.arctan2(yy - cy, xx - cx) - theta0
        ang = np.mod(ang, 2 * math.pi)
        mask = (d2 <= radius ** 2) & (ang <= span)

    bg_level = rng.uniform(0.42, 0.58)
    noise = rng.normal(0.0, cls.texture, size=(3, size, size))
    img = np.full((3, size, size), bg_level) + noise
    color = np.array(cls.color) + rng.uniform(-0.06, 0.06, size=3)
    fg = color[:, None, None] + rng.normal(0.0, cls.texture * 0.5, size=(3, size, size))
    img = np.where(mask[None, :, :], fg, img)
    img = np.clip(img, 0.0, 1.0)
    img = quantize8(img) / 255.0
    return img, mask


def quantize8(values: np.ndarray) -> np.ndarray:
    """8-bit quantization with round-half-up."""
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    images, labels, splits, masks = [], [], [], []
    for k, total in enumerate(spec.samples_per_class):
        for i in range(total):
            img, mask = _render_sample(spec, k, i)
            images.append(img)
            labels.append(k)
            splits.append(split_of_index(i, total, spec.train_fraction, spec.val_fraction))
            masks.append(mask)
    return Dataset(
        images=np.stack(images),
        labels=np.array(labels, dtype=int),
        splits=splits,
        class_names=[c.name for c in spec.classes],
        masks=np.stack(masks),
    )


def write_dataset(dataset: Dataset, root: str) -> str:
    """Write PPM images, PGM masks (suffix .mask.pgm), and labels.csv; returns csv path."""
    os.makedirs(root, exist_ok=True)
    csv_path = os.path.join(root, "labels.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split"])
        for i in range(len(dataset)):
            name = f"sample_{i:05d}.ppm"
            write_ppm(os.path.join(root, name), quantize8(dataset.images[i]))
            if dataset.masks is not None:
                mask8 = (dataset.masks[i].astype(np.uint8)) * 255
                write_pgm(os.path.join(root, f"sample_{i:05d}.mask.pgm"), mask8)
            writer.writerow([name, int(dataset.labels[i]), dataset.splits[i]])
    return csv_path


def load_image_folder(root: str, labels_csv: str, on_error: str = "raise") -> Dataset:
    """Load binary PPM images listed in a CSV with columns path,label,split.

    Malformed rows are collected into an error report; with on_error="raise"
    (default) any error aborts the load with the full report attached.
    """
    errors: list[str] = []
    images, labels, splits, masks, paths = [], [], [], [], []
    any_mask = False
    try:
        with open(labels_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise DatasetError([f"cannot read labels csv {labels_csv}: {e}"])
    if not rows:
        raise DatasetError([f"empty labels csv {labels_csv}: zero classes"])
    for lineno, row in enumerate(rows, start=2):
        if any(row.get(c) in (None, "") for c in ("path", "label", "split")):
            errors.append(f"line {lineno}: missing fields, need path,label,split")
            continue
        rel, label_s, split = row["path"], row["label"], row["split"]
        try:
            label = int(label_s)
        except (TypeError, ValueError):
            errors.append(f"line {lineno}: label {label_s!r} is not an integer")
            continue
        if split not in SPLITS:
            errors.append(f"line {lineno}: unknown split {split!r}")
            continue
        path = os.path.join(root, rel)
        try:
            img = read_ppm(path)
        except FileNotFoundError:
            errors.append(f"line {lineno}: missing file {path}")
            continue
        except NetpbmError as e:
            errors.append(f"line {lineno}: {path}: {e}")
            continue
        images.append(img.astype(float) / 255.0)
        labels.append(label)
        splits.append(split)
        paths.append(path)
        mask_path = path[:-4] + ".mask.pgm" if path.endswith(".ppm") else path + ".mask.pgm"
        if os.path.exists(mask_path):
            masks.append(read_pgm(mask_path) > 127)
            any_mask = True
        else:
            masks.append(None)
    if errors and on_error == "raise":
        raise DatasetError(errors)
    if not images:
        raise DatasetError(errors + ["no loadable rows: zero classes"])
    k = max(labels) + 1
    names = [str(c) for c in range(k)]
    mask_arr = None
    if any_mask:
        h, w = images[0].shape[1:]
        mask_arr = np.stack([m if m is not None else np.zeros((h, w), bool) for m in masks])
    return Dataset(images=np.stack(images), labels=np.array(labels, dtype=int), splits=splits,
                   class_names=names, masks=mask_arr, paths=paths, errors=errors)


def six_channel_pipeline(dataset: Dataset, family: str, normalize: bool = False) -> dict:
    """Per-split arrays ready for a model family.

    B-cos families get the six-channel encoding and never per-channel
    normalization (the complement structure must survive); the standard
    families keep 3 channels with optional mean/std normalization.
    """
    out = {}
    six = family in ("bvt", "bwin")
    stats = None
    if normalize and not six:
        x_train, _, _ = dataset.split_arrays("train")
        stats = (x_train.mean(axis=(0, 2, 3), keepdims=True),
                 x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-8)
    for split in SPLITS:
        x, y, m = dataset.split_arrays(split)
        if len(y) == 0:
            out[split] = (x.reshape((0, 6 if six else 3) + x.shape[2:]), y, m)
            continue
        if six:
            x = encode_six_channel(x)
        elif stats is not None:
            x = (x - stats[0]) / stats[1]
        out[split] = (x, y, m)
    return out

"""Bag/instance data types, synthetic ground-truth dataset, stratified splits.

A bag is an ordered list of instance images sharing one label. The synthetic
generator paints one distinct colored motif per class into a fraction of each
bag's instances, on top of class-independent gray clutter, and records the
motif pixels in a binary mask. Bag labels are therefore exactly decidable
from the masks, which is what makes attribution quality measurable.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, FormatVersionError

MANIFEST_VERSION = 1

# One RGB motif color per class; supports up to 6 classes. All classes
# share the same motif shape on purpose: the class signal lives in the
# color alone, so removing the motif pixels leaves a class-agnostic hole
# (removal-based benchmarks would otherwise read the silhouette). The
# shared shape is deliberately absent from the clutter vocabulary so the
# motif stays spatially distinctive.
CLASS_COLORS = np.array(
    [
        [220, 40, 40],    # red
        [40, 200, 40],    # green
        [50, 70, 220],    # blue
        [230, 210, 40],   # yellow
        [210, 50, 210],   # magenta
        [40, 200, 210],   # cyan
    ],
    dtype=np.uint8,
)
MOTIF_SHAPE = "cross"


@dataclass
class Instance:
    """A single image inside a bag, values in [0, 1], shape (3, H, W)."""

    pixels: np.ndarray
    ground_truth_mask: np.ndarray | None
    instance_id: str

    def validate(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataError(f"instance {self.instance_id}: pixels must be (3, H, W)")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"instance {self.instance_id}: pixel values outside [0, 1]")
        if self.ground_truth_mask is not None:
            if self.ground_truth_mask.shape != self.pixels.shape[1:]:
                raise DataError(
                    f"instance {self.instance_id}: mask shape {self.ground_truth_mask.shape} "
                    f"does not match image shape {self.pixels.shape[1:]}"
                )


@dataclass
class Bag:
    instances: list[Instance]
    label: int
    bag_id: str

    @property
    def size(self) -> int:
        return len(self.instances)

    def pixel_array(self) -> np.ndarray:
        """Stack instance images into an (N, 3, H, W) array."""
        return np.stack([inst.pixels for inst in self.instances])


@dataclass
class Dataset:
    bags: list[Bag]
    num_classes: int
    split_tag: str = "unsplit"

    def __len__(self) -> int:
        return len(self.bags)

    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def validate(self) -> None:
        for bag in self.bags:
            if bag.size < 1:
                raise DataError(f"bag {bag.bag_id} is empty")
            if not 0 <= bag.label < self.num_classes:
                raise DataError(f"bag {bag.bag_id}: label {bag.label} out of range")


@dataclass
class SynthConfig:
    num_bags: int = 300
    bag_size: int = 8
    image_size: int = 32
    num_classes: int = 3
    positive_instance_rate: float = 0.125
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_bags < 0:
            raise ConfigurationError("num_bags must be >= 0")
        for name in ("bag_size", "image_size", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 < self.positive_instance_rate <= 1.0:
            raise ConfigurationError("positive_instance_rate must be in (0, 1]")
        if self.num_classes > len(CLASS_COLORS):
            raise ConfigurationError(
                f"num_classes must be <= {len(CLASS_COLORS)} (one motif per class)"
            )


def _draw_shape(img: np.ndarray, mask: np.ndarray | None, shape: str,
                color: np.ndarray, top: int, left: int, size: int) -> None:
    """Paint a shape into a HxWx3 uint8 image; mark painted pixels in mask."""
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "square":
        sel = np.ones((size, size), dtype=bool)
    elif shape == "disk":
        sel = (yy - c) ** 2 + (xx - c) ** 2 <= c ** 2 + 0.5
    elif shape == "cross":
        half = max(1, size // 4)
        sel = (np.abs(yy - c) <= half) | (np.abs(xx - c) <= half)
    elif shape == "triangle":
        sel = xx >= np.abs(2 * (yy - c))
    elif shape == "ring":
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        sel = (r2 <= c ** 2 + 0.5) & (r2 >= (c - 1.6) ** 2)
    elif shape == "diamond":
        sel = np.abs(yy - c) + np.abs(xx - c) <= c
    else:
        raise ValueError(f"unknown shape {shape!r}")
    ys = np.clip(yy[sel] + top, 0, h - 1)
    xs = np.clip(xx[sel] + left, 0, w - 1)
    img[ys, xs] = color
    if mask is not None:
        mask[ys, xs] = True


def _make_instance(rng: np.random.Generator, cfg: SynthConfig, label: int,
                   positive: bool, instance_id: str) -> Instance:
    s = cfg.image_size
    base = rng.integers(90, 150)
    img = np.clip(
        base + rng.integers(-25, 26, size=(s, s, 1)), 0, 255
    ).astype(np.uint8).repeat(3, axis=2)
    # class-independent gray clutter, kept mid-range so the saturated
    # motif stays the most salient structure in every positive instance
    for _ in range(rng.integers(3, 7)):
        gray = np.full(3, rng.integers(60, 190), dtype=np.uint8)
        sz = int(rng.integers(2, 6))
        top = int(rng.integers(0, s - sz))
        left = int(rng.integers(0, s - sz))
        shape = ["square", "disk", "diamond"][rng.integers(0, 3)]
        _draw_shape(img, None, shape, gray, top, left, sz)
    mask = np.zeros((s, s), dtype=bool)
    if positive:
        sz = 7
        top = int(rng.integers(0, s - sz))
        left = int(rng.integers(0, s - sz))
        _draw_shape(img, mask, MOTIF_SHAPE, CLASS_COLORS[label], top, left, sz)
    pixels = np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0
    return Instance(pixels=pixels, ground_truth_mask=mask, instance_id=instance_id)


def generate_synthetic(config: SynthConfig) -> Dataset:
    """Generate a deterministic synthetic MIL dataset with ground-truth masks.

    Labels are assigned round-robin then shuffled, so class counts are
    balanced to within one bag. Each bag gets its class motif painted into
    ``max(1, round(rate * bag_size))`` of its instances.
    """
    config.validate()
    rng = np.random.default_rng(config.rng_seed)
    labels = np.arange(config.num_bags) % config.num_classes
    rng.shuffle(labels)
    n_pos = max(1, int(round(config.positive_instance_rate * config.bag_size)))
    bags = []
    for b in range(config.num_bags):
        label = int(labels[b])
        bag_id = f"bag_{b:04d}"
        pos_idx = set(rng.choice(config.bag_size, size=n_pos, replace=False).tolist())
        instances = [
            _make_instance(rng, config, label, k in pos_idx, f"{bag_id}_i{k}")
            for k in range(config.bag_size)
        ]
        bags.append(Bag(instances=instances, label=label, bag_id=bag_id))
    return Dataset(bags=bags, num_classes=config.num_classes, split_tag="unsplit")


def decide_label(bag: Bag, num_classes: int) -> int | None:
    """Brute-force label rule: match the mean masked color to the palette.

    Independent of the generator internals; returns None when no instance
    carries motif pixels.
    """
    votes = []
    palette = CLASS_COLORS[:num_classes].astype(np.float64) / 255.0
    for inst in bag.instances:
        m = inst.ground_truth_mask
        if m is None or not m.any():
            continue
        mean_color = inst.pixels[:, m].mean(axis=1)
        votes.append(int(np.argmin(np.linalg.norm(palette - mean_color, axis=1))))
    if not votes:
        return None
    return int(np.bincount(votes).argmax())


def stratified_split(d: Dataset, ratios: tuple[float, float, float],
                     rng_seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Split into train/val/test preserving per-class proportions within 1 bag.

    Within each class, bags are shuffled by a seeded RNG (ties broken by
    bag_id order beforehand) and apportioned by largest remainder.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {sum(ratios)}")
    by_class: dict[int, list[Bag]] = {c: [] for c in range(d.num_classes)}
    for bag in d.bags:
        by_class[bag.label].append(bag)
    for c, bags in by_class.items():
        if not bags:
            raise DataError(f"class {c} has no bags; cannot stratify")
    rng = np.random.default_rng(rng_seed)
    parts: list[list[Bag]] = [[], [], []]
    for c in range(d.num_classes):
        bags = sorted(by_class[c], key=lambda b: b.bag_id)
        rng.shuffle(bags)
        n = len(bags)
        exact = [r * n for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        remainders = [e - k for e, k in zip(exact, counts)]
        for i in sorted(range(3), key=lambda i: -remainders[i])[: n - sum(counts)]:
            counts[i] += 1
        offset = 0
        for i in range(3):
            parts[i].extend(bags[offset:offset + counts[i]])
            offset += counts[i]
    tags = ("train", "val", "test")
    return tuple(
        Dataset(bags=sorted(p, key=lambda b: b.bag_id), num_classes=d.num_classes,
                split_tag=t)
        for p, t in zip(parts, tags)
    )


# ---------------------------------------------------------------------------
# Directory serialization: lossless PNGs plus a versioned JSON manifest.
# ---------------------------------------------------------------------------

def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def save_dataset(d: Dataset, root: str | Path, force: bool = False) -> Path:
    """Write a dataset directory: instances/<bag>/<id>.png plus manifest.json."""
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DataError(f"refusing to overwrite non-empty directory {root}")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "schema_version": MANIFEST_VERSION,
        "num_classes": d.num_classes,
        "split_tag": d.split_tag,
        "bags": [],
    }
    for bag in d.bags:
        bag_dir = root / "instances" / bag.bag_id
        bag_dir.mkdir(parents=True, exist_ok=True)
        entry = {"bag_id": bag.bag_id, "label": int(bag.label), "instances": []}
        for inst in bag.instances:
            img_u8 = np.round(inst.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
            img_rel = f"instances/{bag.bag_id}/{inst.instance_id}.png"
            _save_png(root / img_rel, img_u8)
            mask_rel = None
            if inst.ground_truth_mask is not None:
                mask_rel = f"instances/{bag.bag_id}/{inst.instance_id}_mask.png"
                _save_png(root / mask_rel,
                          inst.ground_truth_mask.astype(np.uint8) * 255)
            entry["instances"].append(
                {"instance_id": inst.instance_id, "image": img_rel, "mask": mask_rel}
            )
        manifest["bags"].append(entry)
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return root


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    version = manifest.get("schema_version")
    if version != MANIFEST_VERSION:
        raise FormatVersionError(
            f"manifest schema_version {version} unsupported (expected {MANIFEST_VERSION})"
        )
    bags = []
    for entry in manifest["bags"]:
        instances = []
        for ie in entry["instances"]:
            img = np.asarray(Image.open(root / ie["image"]), dtype=np.float32) / 255.0
            pixels = np.ascontiguousarray(img.transpose(2, 0, 1))
            mask = None
            if ie["mask"] is not None:
                mask = np.asarray(Image.open(root / ie["mask"])) > 127
            instances.append(Instance(pixels=pixels, ground_truth_mask=mask,
                                      instance_id=ie["instance_id"]))
        bags.append(Bag(instances=instances, label=int(entry["label"]),
                        bag_id=entry["bag_id"]))
    return Dataset(bags=bags, num_classes=int(manifest["num_classes"]),
                   split_tag=manifest.get("split_tag", "unsplit"))


def copy_with_pixels(bag: Bag, pixels: np.ndarray) -> Bag:
    """Clone a bag with replaced instance pixels, keeping labels, ids, masks."""
    instances = [
        replace(inst, pixels=np.ascontiguousarray(pixels[k], dtype=np.float32))
        for k, inst in enumerate(bag.instances)
    ]
    return Bag(instances=instances, label=bag.label, bag_id=bag.bag_id)

"""Datasets: synthetic pattern generator, PNG folder loading, sampling, augmentation.

The synthetic generator is the desk-scale stand-in for a real image corpus.
Base classes are slots of texture families partitioned by frequency or cell
size (stripes, rings, checkers); novel classes come from a disjoint set of
structurally different families (dot lattices, spokes, square rings, plaid,
line grids), so novel categories are genuinely unseen: their identity lives
in pattern structure, not in a parameter band the base task already teaches.
All families are closed under horizontal flips, which keeps flip
augmentation label-safe.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .rng import make_rng

SPLIT_TAGS = ("base_train", "base_test", "novel_train", "novel_test")
_MAX_SLOTS_PER_FAMILY = 8


@dataclass
class ImageDataset:
    images: np.ndarray        # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray        # (N,) int64, dense within each of base/novel
    split_tags: np.ndarray    # (N,) unicode, one of SPLIT_TAGS
    class_names: list         # base class names first, then novel
    n_base: int
    n_novel: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.split_tags.shape != (n,):
            raise DataError("images, labels and split_tags lengths disagree")
        bad = set(np.unique(self.split_tags)) - set(SPLIT_TAGS)
        if bad:
            raise DataError(f"unknown split tags: {sorted(bad)}")
        if len(self.class_names) != self.n_base + self.n_novel:
            raise DataError("class_names length must be n_base + n_novel")

    @property
    def image_size(self):
        return self.images.shape[-1]

    def indices(self, *tags):
        mask = np.isin(self.split_tags, tags)
        return np.nonzero(mask)[0]

    def subset(self, *tags):
        idx = self.indices(*tags)
        return self.images[idx], self.labels[idx]

    def class_name(self, label, novel=False):
        return self.class_names[self.n_base + label if novel else label]


@dataclass(frozen=True)
class SyntheticShapesConfig:
    n_base_classes: int = 8
    n_novel_classes: int = 4
    examples_per_class: int = 40
    image_size: int = 32
    seed: int = 0
    test_fraction: float = 0.2
    noise_std: float = 0.02

    def __post_init__(self):
        if self.n_base_classes < 2:
            raise ConfigError(f"need >= 2 base classes, got {self.n_base_classes}")
        if self.n_novel_classes < 2:
            raise ConfigError(f"need >= 2 novel classes, got {self.n_novel_classes}")
        if self.examples_per_class < 2:
            raise ConfigError("need >= 2 examples per class to split train/test")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


# (name, parameter span partitioned across class slots). Base families are
# texture bands; novel families are distinct pattern structures.
_BASE_FAMILIES = (
    ("vstripes", (2.0, 10.0)),   # stripe frequency, near-vertical orientation
    ("hstripes", (2.0, 10.0)),   # stripe frequency, near-horizontal orientation
    ("rings", (1.5, 7.5)),       # radial frequency
    ("checkers", (3.0, 12.0)),   # cell size in pixels
)
_NOVEL_FAMILIES = (
    ("dots", (5.8, 8.2)),        # blob lattice spacing in pixels
    ("spokes", (4.6, 8.4)),      # angular frequency (rounded to an integer)
    ("sqrings", (3.8, 5.7)),     # square-ring radial frequency
    ("plaid", (2.8, 4.7)),       # product-sinusoid lattice frequency
    ("grid", (5.3, 7.7)),        # bright line spacing in pixels
)
_MAX_NOVEL_SLOTS = 2


def _render(family, param, size, rng, noise_std):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    # per-example jitter: position, mild scale, phase, amplitude, brightness
    cx = (size - 1) / 2 + rng.uniform(-0.16 * size, 0.16 * size)
    cy = (size - 1) / 2 + rng.uniform(-0.16 * size, 0.16 * size)
    coord_scale = rng.uniform(0.96, 1.04)
    phase = rng.uniform(0.0, 2 * np.pi)
    amplitude = rng.uniform(0.28, 0.5)
    brightness = rng.uniform(0.55, 1.0)

    if family in ("vstripes", "hstripes"):
        # orientation wobble is symmetric about the axis, so classes stay
        # closed under horizontal flips
        theta = (0.0 if family == "vstripes" else np.pi / 2) + rng.uniform(-0.3, 0.3)
        u = ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) * coord_scale
        img = 0.5 + amplitude * np.sin(2 * np.pi * param * u / size + phase)
    elif family == "rings":
        r = np.hypot(xx - cx, yy - cy) * coord_scale
        img = 0.5 + amplitude * np.sin(2 * np.pi * param * r / size + phase)
    elif family == "checkers":
        ox, oy = rng.uniform(0.0, param, size=2)
        cell = param * coord_scale
        img = 0.5 - amplitude + 2 * amplitude * (
            (np.floor((xx + ox) / cell) + np.floor((yy + oy) / cell)) % 2
        )
    elif family == "dots":
        s = param * coord_scale
        gx = (xx - cx) % s - s / 2
        gy = (yy - cy) % s - s / 2
        img = 0.5 - amplitude + 2 * amplitude * np.exp(
            -(gx ** 2 + gy ** 2) / (2 * (s / 3.2) ** 2)
        )
    elif family == "spokes":
        k = int(round(param))
        ang = np.arctan2(yy - cy, xx - cx)
        img = 0.5 + amplitude * np.sin(k * ang + phase)
    elif family == "sqrings":
        r = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) * coord_scale
        img = 0.5 + amplitude * np.sin(2 * np.pi * param * r / size + phase)
    elif family == "plaid":
        img = 0.5 + amplitude * (
            np.sin(2 * np.pi * param * (xx - cx) / size + phase)
            * np.sin(2 * np.pi * param * (yy - cy) / size
                     + rng.uniform(0.0, 2 * np.pi))
        )
    elif family == "grid":
        s = param * coord_scale
        lines = np.maximum(np.abs(((xx - cx) % s) - s / 2) < 1.2,
                           np.abs(((yy - cy) % s) - s / 2) < 1.2)
        img = 0.5 - amplitude + 2 * amplitude * lines.astype(np.float64)
    else:
        raise ConfigError(f"unknown pattern family {family}")

    img = img * brightness
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _class_plan(n_classes, families, max_slots, kind):
    slots = math.ceil(n_classes / len(families))
    if slots > max_slots:
        raise ConfigError(
            f"{n_classes} {kind} classes exceed {len(families)} pattern "
            f"families x {max_slots} range partitions"
        )
    plan = []
    for c in range(n_classes):
        family, span = families[c % len(families)]
        slot = c // len(families)
        lo, hi = span
        width = (hi - lo) / slots
        # 12% margins keep slots disjoint under the +/-4% coordinate jitter
        plan.append((f"{family}_{slot}", family,
                     lo + slot * width + 0.12 * width,
                     lo + (slot + 1) * width - 0.12 * width))
    return plan


def generate_synthetic(config):
    """Deterministic synthetic dataset of parameterized pattern classes."""
    rng = make_rng(config.seed, "gen")
    size = config.image_size
    n = config.examples_per_class
    n_test = max(1, round(config.test_fraction * n))

    plan = _class_plan(config.n_base_classes, _BASE_FAMILIES,
                       _MAX_SLOTS_PER_FAMILY, "base")
    plan += _class_plan(config.n_novel_classes, _NOVEL_FAMILIES,
                        _MAX_NOVEL_SLOTS, "novel")

    images, labels, tags, names = [], [], [], []
    for c, (name, family, p_lo, p_hi) in enumerate(plan):
        names.append(name)
        novel = c >= config.n_base_classes
        label = c - config.n_base_classes if novel else c
        for i in range(n):
            param = rng.uniform(p_lo, p_hi)
            gray = _render(family, param, size, rng, config.noise_std)
            images.append(np.repeat(gray[None].astype(np.float32), 3, axis=0))
            labels.append(label)
            test = i >= n - n_test
            tags.append(("novel_" if novel else "base_") + ("test" if test else "train"))

    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        split_tags=np.asarray(tags),
        class_names=names,
        n_base=config.n_base_classes,
        n_novel=config.n_novel_classes,
    )


def load_split_spec(path_or_dict):
    if isinstance(path_or_dict, dict):
        spec = path_or_dict
    else:
        try:
            with open(path_or_dict) as f:
                spec = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read split spec {path_or_dict}: {exc}") from exc
    for key in ("base", "novel"):
        if key not in spec or not isinstance(spec[key], list):
            raise DataError(f"split spec needs a '{key}' class list")
    overlap = set(spec["base"]) & set(spec["novel"])
    if overlap:
        raise DataError(f"classes listed as both base and novel: {sorted(overlap)}")
    spec.setdefault("test_fraction", 0.2)
    return spec


def load_image_folder(root_path, split_spec, image_size=32):
    """Load root/class_name/*.png into a dataset, resized and scaled to [0, 1].

    Deterministic: files are taken in sorted order and the per-class test
    block is the trailing test_fraction of that order.
    """
    spec = load_split_spec(split_spec)
    tf = float(spec["test_fraction"])
    if not 0.0 < tf < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {tf}")

    images, labels, tags = [], [], []
    names = list(spec["base"]) + list(spec["novel"])
    for ci, name in enumerate(names):
        novel = ci >= len(spec["base"])
        label = ci - len(spec["base"]) if novel else ci
        cdir = os.path.join(root_path, name)
        if not os.path.isdir(cdir):
            raise DataError(f"class directory missing: {cdir}")
        files = sorted(f for f in os.listdir(cdir) if f.lower().endswith(".png"))
        if not files:
            raise DataError(f"class '{name}' has no PNG files in {cdir}")
        n_test = max(1, round(tf * len(files)))
        if n_test >= len(files):
            raise DataError(f"class '{name}': test fraction leaves no training files")
        for i, fname in enumerate(files):
            fpath = os.path.join(cdir, fname)
            try:
                with Image.open(fpath) as im:
                    im = im.convert("RGB").resize((image_size, image_size),
                                                  Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except OSError as exc:
                raise DataError(f"unreadable image {fpath}: {exc}") from exc
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
            test = i >= len(files) - n_test
            tags.append(("novel_" if novel else "base_") + ("test" if test else "train"))

    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        split_tags=np.asarray(tags),
        class_names=names,
        n_base=len(spec["base"]),
        n_novel=len(spec["novel"]),
    )


def save_image_folder(dataset, root_path):
    """Write a dataset back out as root/class_name/img_NNN.png + split_spec.json."""
    os.makedirs(root_path, exist_ok=True)
    counters = {}
    for img, label, tag in zip(dataset.images, dataset.labels, dataset.split_tags):
        novel = tag.startswith("novel")
        name = dataset.class_name(int(label), novel=novel)
        cdir = os.path.join(root_path, name)
        os.makedirs(cdir, exist_ok=True)
        i = counters.get(name, 0)
        counters[name] = i + 1
        arr = np.clip(np.round(img.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(cdir, f"img_{i:03d}.png"))
    test_count = int((dataset.split_tags == "base_test").sum())
    base_count = int(np.isin(dataset.split_tags, ("base_train", "base_test")).sum())
    spec = {
        "base": dataset.class_names[:dataset.n_base],
        "novel": dataset.class_names[dataset.n_base:],
        # effective fraction, so a reload reproduces the same per-class split
        "test_fraction": round(test_count / max(base_count, 1), 6),
    }
    with open(os.path.join(root_path, "split_spec.json"), "w") as f:
        json.dump(spec, f, indent=2, sort_keys=True)
        f.write("\n")
    return sum(counters.values())


def sample_k_shot(dataset, k, rng):
    """K support examples per novel class from novel_train, without replacement."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    support, remainder = [], []
    train_idx = dataset.indices("novel_train")
    for c in range(dataset.n_novel):
        pool = train_idx[dataset.labels[train_idx] == c]
        if len(pool) < k:
            raise DataError(
                f"novel class '{dataset.class_name(c, novel=True)}' has only "
                f"{len(pool)} training examples, need {k}"
            )
        chosen = rng.choice(pool, size=k, replace=False)
        support.append(chosen)
        remainder.append(np.setdiff1d(pool, chosen))
    return np.concatenate(support), np.concatenate(remainder)


def augment(img, rng, crop_pad=4, flip_prob=0.5):
    """Zero-pad, random-crop back to size, then maybe flip horizontally.

    Always consumes the same number of rng draws, so trajectories with
    different augmentation settings stay comparable seed-for-seed.
    """
    if crop_pad < 0:
        raise ConfigError(f"crop_pad must be >= 0, got {crop_pad}")
    if not 0.0 <= flip_prob <= 1.0:
        raise ConfigError(f"flip_prob must be in [0, 1], got {flip_prob}")
    c, h, w = img.shape
    dy, dx = rng.integers(0, 2 * crop_pad + 1, size=2)
    if crop_pad:
        padded = np.zeros((c, h + 2 * crop_pad, w + 2 * crop_pad), dtype=img.dtype)
        padded[:, crop_pad:crop_pad + h, crop_pad:crop_pad + w] = img
        img = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < flip_prob:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def augment_batch(images, rng, crop_pad=4, flip_prob=0.5):
    return np.stack([augment(img, rng, crop_pad, flip_prob) for img in images])

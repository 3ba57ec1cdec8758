"""Desk-scale labeled image sets.

Two built-in generators, both fully determined by a seed and built only from
data that ships with scikit-image / scikit-learn:

``glyphs``
    Fine-grained many-class task. Each class is a procedurally drawn stroke
    glyph; every sample renders it with random pose, scale and colour on a
    random crop of a natural photograph or texture. Class identity lives in
    shape, not in global colour statistics.
``digits``
    The 8x8 handwritten digits set, upsampled to 32x32 grayscale. A simple
    10-class task.

Directory datasets (``<root>/<class>/<file>.png``) are also supported.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import ContractError
from .imaging import ImageTensor, LabeledImage, load_image

GLYPH_BACKGROUNDS = (
    "astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field", "immunohistochemistry",
    "retina", "brick", "grass", "gravel", "camera", "moon",
)


@dataclass(frozen=True)
class DatasetSplit:
    items: tuple
    class_count: int
    split_tag: str
    dataset_id: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if self.class_count < 1:
            raise ContractError("class_count must be positive")
        if self.split_tag not in ("train", "test"):
            raise ContractError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")
        for it in self.items:
            if it.label >= self.class_count:
                raise ContractError(f"label {it.label} of {it.source_id} >= class_count {self.class_count}")

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def arrays(self, dtype=np.float64):
        """Stacked N x H x W x C pixels and the label vector."""
        if not self.items:
            return np.zeros((0,)), self.labels
        return np.stack([it.image.pixels for it in self.items]).astype(dtype), self.labels

    def subset(self, indices) -> "DatasetSplit":
        return DatasetSplit(tuple(self.items[i] for i in indices), self.class_count,
                            self.split_tag, self.dataset_id)

    def subsample(self, n, seed=0) -> "DatasetSplit":
        """Random subset of ``n`` items, kept in original order."""
        if n is None or n >= len(self.items):
            return self
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(self.items), size=n, replace=False))
        return self.subset(keep)


def subset_classes(split: DatasetSplit, classes: Sequence[int]) -> DatasetSplit:
    """Keep only ``classes`` and relabel them 0..k-1 in the given order."""
    remap = {int(c): i for i, c in enumerate(classes)}
    items = tuple(LabeledImage(it.image, remap[it.label], it.source_id)
                  for it in split.items if it.label in remap)
    return DatasetSplit(items, len(remap), split.split_tag, f"{split.dataset_id}-c{len(remap)}")


def stratified_split(items, class_count, test_fraction, seed, dataset_id):
    """Per-class shuffle and cut into (train, test)."""
    rng = np.random.default_rng(seed)
    labels = np.array([it.label for it in items])
    train_idx, test_idx = [], []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train = DatasetSplit(tuple(items[i] for i in sorted(train_idx)), class_count, "train", dataset_id)
    test = DatasetSplit(tuple(items[i] for i in sorted(test_idx)), class_count, "test", dataset_id)
    return train, test


# -- glyphs --------------------------------------------------------------

@lru_cache(maxsize=1)
def _backgrounds():
    import skimage.data

    out = []
    for name in GLYPH_BACKGROUNDS:
        img = getattr(skimage.data, name)().astype(np.float32)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        out.append(img[:, :, :3])
    return out


def _glyph_templates(n, rng):
    templates = []
    for _ in range(n):
        parts = []
        for _ in range(rng.integers(3, 6)):
            kind = str(rng.choice(["line", "ellipse", "poly"]))
            npts = 2 if kind == "ellipse" else int(rng.integers(2, 5))
            parts.append((kind, rng.uniform(-0.8, 0.8, (npts, 2)), float(rng.uniform(0.08, 0.18))))
        templates.append(parts)
    return templates


def _render_glyph(parts, size, rng, background, colour, oversample=4):
    big = size * oversample
    canvas = Image.fromarray(np.clip(background, 0, 255).astype(np.uint8)).resize((big, big), Image.BILINEAR)
    draw = ImageDraw.Draw(canvas)
    theta = np.deg2rad(rng.uniform(-15, 15))
    scale = rng.uniform(0.8, 1.05) * big * 0.45
    offset = np.array([big / 2, big / 2]) + rng.uniform(-3, 3, 2) * oversample
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    fill = tuple(int(v) for v in colour)
    for kind, pts, width in parts:
        p = (pts @ rot.T) * scale + offset
        stroke = max(1, int(width * scale * 0.5))
        if kind == "poly" and len(p) >= 3:
            draw.polygon([tuple(q) for q in p], fill=fill)
        elif kind == "ellipse":
            r = np.abs(pts[1]) * scale * 0.4 + 2
            c = p[0]
            draw.ellipse([c[0] - r[0], c[1] - r[1], c[0] + r[0], c[1] + r[1]], outline=fill,
                         width=max(1, int(width * scale * 0.4)))
        else:
            draw.line([tuple(q) for q in p], fill=fill, width=stroke)
    return np.asarray(canvas.resize((size, size), Image.LANCZOS), dtype=np.float64)


def make_glyphs(n_classes=50, per_class=80, size=32, seed=0, test_fraction=0.2, noise=3.0):
    """Build the glyph task; returns (train, test) splits with integer-valued pixels."""
    rng = np.random.default_rng(seed)
    templates = _glyph_templates(n_classes, rng)
    backgrounds = _backgrounds()
    items = []
    for c in range(n_classes):
        for k in range(per_class):
            src = backgrounds[rng.integers(len(backgrounds))]
            h, w, _ = src.shape
            crop = int(rng.integers(48, 128))
            y0 = int(rng.integers(0, h - crop))
            x0 = int(rng.integers(0, w - crop))
            colour = rng.uniform(0, 255, 3)
            px = _render_glyph(templates[c], size, rng, src[y0 : y0 + crop, x0 : x0 + crop], colour)
            px = np.rint(np.clip(px + rng.normal(0, noise, px.shape), 0, 255))
            items.append(LabeledImage(ImageTensor(px), c, f"glyphs{n_classes}-s{seed}-{c:03d}-{k:03d}"))
    return stratified_split(items, n_classes, test_fraction, seed + 1, f"glyphs{n_classes}-s{seed}")


# -- digits --------------------------------------------------------------

def make_digits(size=32, seed=0, test_fraction=0.2):
    """Handwritten digits (10 classes), bilinear-upsampled grayscale."""
    from sklearn.datasets import load_digits

    d = load_digits()
    items = []
    for i, (img, label) in enumerate(zip(d.images, d.target)):
        im = Image.fromarray(np.uint8(np.rint(img * 255.0 / 16.0)), mode="L")
        px = np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64)
        items.append(LabeledImage(ImageTensor(px), int(label), f"digits-{i:04d}"))
    return stratified_split(items, 10, test_fraction, seed, "digits")


# -- directories ---------------------------------------------------------

def load_directory(root, target_size=None, test_fraction=0.2, seed=0):
    """Class-per-subdirectory image folder -> (train, test).

    Subdirectories are sorted by name; their position is the label.
    """
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if len(classes) < 1:
        raise ContractError(f"{root}: no class subdirectories")
    items = []
    for label, cdir in enumerate(classes):
        for f in sorted(cdir.iterdir()):
            if f.suffix.lower() in (".png", ".jpg", ".jpeg"):
                items.append(LabeledImage(load_image(f, target_size), label, f"{cdir.name}/{f.name}"))
    digest = hashlib.sha256(str(root.resolve()).encode()).hexdigest()[:8]
    return stratified_split(items, len(classes), test_fraction, seed, f"dir-{root.name}-{digest}")


BUILTIN = {"glyphs": make_glyphs, "digits": make_digits}


def load_dataset(spec: dict):
    """Resolve a dataset block (``name`` for built-ins or ``path`` for folders)."""
    spec = dict(spec)
    if spec.get("path"):
        size = spec.get("image_size")
        if isinstance(size, int):
            size = (size, size)
        return load_directory(spec["path"], tuple(size) if size else None,
                              spec.get("test_fraction", 0.2), spec.get("seed", 0))
    name = spec.get("name", "glyphs")
    if name == "glyphs":
        return make_glyphs(spec.get("class_count", 50), spec.get("per_class", 80), spec.get("image_size") or 32,
                           spec.get("seed", 0), spec.get("test_fraction", 0.2))
    if name == "digits":
        return make_digits(spec.get("image_size") or 32, spec.get("seed", 0), spec.get("test_fraction", 0.2))
    raise ContractError(f"unknown built-in dataset {name!r}")

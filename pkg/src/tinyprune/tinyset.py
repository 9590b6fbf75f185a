"""Tiny training sets: sources, sampling, synthetic data and augmentation."""

from __future__ import annotations

import json
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp"}


class DataError(ValueError):
    pass


@dataclass
class Recipe:
    source: str
    mode: str  # kshot | random_n | synthetic
    k_or_n: int
    seed: int
    stratified: bool = False
    shape: Optional[list] = None  # synthetic only

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class TinySet:
    images: np.ndarray  # [n, C, H, W] float32
    labels: Optional[np.ndarray]  # [n] int64 or None
    recipe: Recipe
    indices: Optional[np.ndarray] = None  # positions in the source

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise DataError(f"images must be [n, C, H, W], got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError("labels must align 1:1 with images")

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self):
        return self.labels is not None


# --------------------------------------------------------------------------
# sources
# --------------------------------------------------------------------------


@dataclass
class ArraySource:
    """In-memory labeled image collection."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "array"

    def __len__(self):
        return len(self.labels)

    def load(self, indices):
        return np.asarray(self.images[np.asarray(indices, dtype=np.int64)], dtype=np.float32)


@dataclass
class ImageFolderSource:
    """``root/<class>/<image>`` layout; classes are sorted folder names.

    Images decode to RGB in [0, 1], optionally resized to ``size`` (square,
    bilinear), then normalised with ``mean``/``std``.
    """

    root: str
    size: Optional[int] = None
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    name: str = ""
    paths: list = field(default_factory=list, init=False)
    labels: np.ndarray = field(default=None, init=False)
    classes: list = field(default_factory=list, init=False)

    def __post_init__(self):
        root = Path(self.root)
        if not root.is_dir():
            raise DataError(f"image folder {root} does not exist")
        self.classes = sorted(p.name for p in root.iterdir() if p.is_dir())
        labels = []
        for ci, cls in enumerate(self.classes):
            for f in sorted((root / cls).iterdir()):
                if f.suffix.lower() in IMAGE_EXTS:
                    self.paths.append(f)
                    labels.append(ci)
        if not self.paths:
            raise DataError(f"no images found under {root}")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.name = self.name or root.name

    def __len__(self):
        return len(self.paths)

    def load(self, indices):
        from PIL import Image

        mean = np.asarray(self.mean, np.float32)[:, None, None]
        std = np.asarray(self.std, np.float32)[:, None, None]
        out = []
        for i in indices:
            with Image.open(self.paths[int(i)]) as im:
                im = im.convert("RGB")
                if self.size:
                    im = im.resize((self.size, self.size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
            out.append((arr - mean) / std)
        shapes = {a.shape for a in out}
        if len(shapes) > 1:
            raise DataError(f"images differ in size {shapes}; set a resize size")
        return np.stack(out)


def load_cifar10(root, train=True, name=None):
    """Read the python-pickle CIFAR-10 batches from ``root``, normalised."""
    root = Path(root)
    files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for f in files:
        path = root / f
        if not path.exists():
            raise DataError(f"CIFAR-10 batch {path} not found")
        with open(path, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.append(np.asarray(d[b"labels"], dtype=np.int64))
    x = np.concatenate(xs).astype(np.float32) / 255.0
    x = (x - np.asarray(CIFAR_MEAN, np.float32)[:, None, None]) / np.asarray(CIFAR_STD, np.float32)[:, None, None]
    return ArraySource(x, np.concatenate(ys), name or f"cifar10-{'train' if train else 'test'}")


# --------------------------------------------------------------------------
# synthetic shapes: a deterministic 10-class 32x32 stand-in for a natural
# image benchmark when none is available offline
# --------------------------------------------------------------------------

SHAPE_CLASSES = (
    "disk", "square", "triangle", "cross", "ring",
    "h-bars", "v-bars", "diagonal", "checker", "dots",
)


def _shape_mask(cls, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = rng.uniform(0.22, 0.36) * size
    cy, cx = rng.uniform(0.35, 0.65, size=2) * size
    dy, dx = yy - cy, xx - cx
    if cls == 0:
        return (dy**2 + dx**2) <= r**2
    if cls == 1:
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if cls == 2:
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if cls == 3:
        t = r * 0.3
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if cls == 4:
        d = np.sqrt(dy**2 + dx**2)
        return (d <= r) & (d >= r * 0.55)
    period = rng.uniform(5.0, 8.0)
    phase = rng.uniform(0, period)
    if cls == 5:
        return ((yy + phase) % period) < period / 2
    if cls == 6:
        return ((xx + phase) % period) < period / 2
    if cls == 7:
        return ((xx + yy + phase) % (period * 1.4)) < period * 0.7
    if cls == 8:
        return (((yy + phase) // period + (xx + phase) // period) % 2) == 0
    spacing = rng.uniform(6.0, 8.0)
    gy = ((yy + phase) % spacing) - spacing / 2
    gx = ((xx + phase) % spacing) - spacing / 2
    return gy**2 + gx**2 <= (spacing * 0.22) ** 2


def synthetic_shapes(n_per_class, seed=0, size=32, name=None):
    """Labeled colour-shape images, normalised to roughly zero mean/unit std.

    Each image has a random background colour, a random foreground colour, a
    class-specific pattern with random geometry, an illumination ramp and
    pixel noise.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A17]))
    classes = len(SHAPE_CLASSES)
    n = n_per_class * classes
    x = np.empty((n, 3, size, size), np.float32)
    y = np.repeat(np.arange(classes), n_per_class)
    for i, cls in enumerate(y):
        bg = rng.uniform(0, 1, 3).astype(np.float32)
        fg = rng.uniform(0, 1, 3).astype(np.float32)
        while np.abs(fg - bg).sum() < 0.45:
            fg = rng.uniform(0, 1, 3).astype(np.float32)
        m = _shape_mask(int(cls), size, rng)
        img = np.where(m[None], fg[:, None, None], bg[:, None, None])
        # low-frequency illumination gradient plus pixel noise
        gy, gx = rng.normal(0, 0.25, 2)
        ramp = (np.linspace(-0.5, 0.5, size)[:, None] * gy + np.linspace(-0.5, 0.5, size)[None, :] * gx)
        img = img + ramp[None] + rng.normal(0, 0.2, img.shape)
        x[i] = np.clip(img, 0, 1)
    perm = rng.permutation(n)
    x = (x[perm] - 0.5) / 0.3
    return ArraySource(x.astype(np.float32), y[perm].astype(np.int64), name or f"shapes-s{seed}")


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_tinyset(source, mode, k_or_n, seed, stratified=False):
    """Deterministic k-shot or n-random draw (without replacement) from ``source``."""
    labels = np.asarray(source.labels)
    k_or_n = int(k_or_n)
    rng = np.random.default_rng(seed)
    if k_or_n < 1:
        raise DataError("k_or_n must be >= 1")
    if mode == "kshot":
        idx = []
        for c in np.unique(labels):
            pool = np.flatnonzero(labels == c)
            if len(pool) < k_or_n:
                raise DataError(f"class {c} has {len(pool)} items, fewer than k={k_or_n}")
            idx.append(rng.choice(pool, k_or_n, replace=False))
        idx = np.concatenate(idx)
    elif mode == "random_n":
        if len(labels) < k_or_n:
            raise DataError(f"source has {len(labels)} items, fewer than n={k_or_n}")
        if stratified:
            classes = np.unique(labels)
            per = np.full(len(classes), k_or_n // len(classes))
            per[: k_or_n % len(classes)] += 1
            idx = np.concatenate(
                [rng.choice(np.flatnonzero(labels == c), p, replace=False) for c, p in zip(classes, per) if p]
            )
            idx = rng.permutation(idx)
        else:
            idx = rng.choice(len(labels), k_or_n, replace=False)
    else:
        raise DataError(f"unknown sampling mode {mode!r}")
    recipe = Recipe(getattr(source, "name", "source"), mode, k_or_n, int(seed), bool(stratified))
    return TinySet(source.load(idx), labels[idx], recipe, idx)


def synth_gaussian(count, shape, seed):
    """``count`` i.i.d. standard-normal images of ``shape`` [C, H, W]; unlabeled."""
    if count < 1:
        raise DataError("count must be >= 1")
    rng = np.random.default_rng(seed)
    imgs = rng.standard_normal((count,) + tuple(shape), dtype=np.float32)
    return TinySet(imgs, None, Recipe("gaussian", "synthetic", int(count), int(seed), False, list(shape)))


def replay_recipe(recipe, source=None):
    if recipe.mode == "synthetic":
        return synth_gaussian(recipe.k_or_n, recipe.shape, recipe.seed)
    if source is None:
        raise DataError("a source is required to replay a sampling recipe")
    return sample_tinyset(source, recipe.mode, recipe.k_or_n, recipe.seed, recipe.stratified)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


def augment_batch(batch, policy, seed):
    """Apply a training augmentation policy deterministically given ``seed``.

    ``cifar``: 4-pixel reflection pad, random 32x32 crop, horizontal flip.
    ``imagenet``: random resized crop (scale 0.08-1, ratio 3/4-4/3) to
    224x224 and horizontal flip.  ``none`` returns the input unchanged.
    """
    if policy in (None, "none"):
        return batch
    batch = np.asarray(batch)
    n, c, h, w = batch.shape
    rng = np.random.default_rng(seed)
    if policy == "cifar":
        if (h, w) != (32, 32):
            raise DataError(f"cifar policy needs 32x32 input, got {h}x{w}")
        padded = np.pad(batch, ((0, 0), (0, 0), (4, 4), (4, 4)), mode="reflect")
        oy = rng.integers(0, 9, n)
        ox = rng.integers(0, 9, n)
        flip = rng.random(n) < 0.5
        out = np.empty_like(batch)
        for i in range(n):
            crop = padded[i, :, oy[i] : oy[i] + 32, ox[i] : ox[i] + 32]
            out[i] = crop[:, :, ::-1] if flip[i] else crop
        return out
    if policy == "imagenet":
        if (h, w) != (224, 224):
            raise DataError(f"imagenet policy needs 224x224 input, got {h}x{w}")
        from scipy.ndimage import zoom

        out = np.empty_like(batch)
        for i in range(n):
            top, left, ch, cw = _rrc_box(rng, h, w)
            crop = batch[i, :, top : top + ch, left : left + cw]
            res = zoom(crop, (1, 224 / ch, 224 / cw), order=1, grid_mode=True, mode="nearest")
            res = res[:, :224, :224]
            if res.shape[1:] != (224, 224):  # guard against zoom rounding
                res = np.pad(res, ((0, 0), (0, 224 - res.shape[1]), (0, 224 - res.shape[2])), mode="edge")
            out[i] = res[:, :, ::-1] if rng.random() < 0.5 else res
        return out
    raise DataError(f"unknown augmentation policy {policy!r}")


def _rrc_box(rng, h, w, scale=(0.08, 1.0), ratio=(3 / 4, 4 / 3)):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        ar = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * ar)))
        ch = int(round(np.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    s = min(h, w)
    return (h - s) // 2, (w - s) // 2, s, s


def policy_for(input_spec):
    return {32: "cifar", 224: "imagenet"}.get(int(input_spec[1]), "none")


# --------------------------------------------------------------------------
# export / import
# --------------------------------------------------------------------------


def save_tinyset(ts, path):
    """Write recipe.json, images.bin (LE float32) and labels.bin (LE int64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"recipe": asdict(ts.recipe), "shape": list(ts.images.shape), "labeled": ts.labeled}
    if ts.indices is not None:
        meta["indices"] = [int(i) for i in ts.indices]
    np.ascontiguousarray(ts.images, dtype="<f4").tofile(path / "images.bin")
    if ts.labeled:
        np.ascontiguousarray(ts.labels, dtype="<i8").tofile(path / "labels.bin")
    (path / "recipe.json").write_text(json.dumps(meta, indent=1))
    return path


def load_tinyset(path):
    path = Path(path)
    try:
        meta = json.loads((path / "recipe.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read tiny set at {path}: {exc}") from exc
    shape = tuple(meta["shape"])
    raw = np.fromfile(path / "images.bin", dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DataError(f"images.bin holds {raw.size} values, expected {int(np.prod(shape))}")
    labels = None
    if meta.get("labeled"):
        labels = np.fromfile(path / "labels.bin", dtype="<i8")
    idx = np.asarray(meta["indices"]) if "indices" in meta else None
    return TinySet(raw.reshape(shape).astype(np.float32), labels, Recipe(**meta["recipe"]), idx)


def as_arrays(data):
    """``(images, labels)`` from a TinySet, a (x, y) pair or a bare array."""
    if isinstance(data, TinySet):
        return data.images, data.labels
    if isinstance(data, tuple):
        return np.asarray(data[0], np.float32), None if data[1] is None else np.asarray(data[1])
    return np.asarray(data, np.float32), None

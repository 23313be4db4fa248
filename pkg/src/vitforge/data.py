"""Dataset loading, splitting, augmentation, and synthetic generation.

On-disk layout: ``root/<class_name>/<image files>`` plus an optional
``classes.txt`` mapping file with one ``name=id`` line per class. Loaded
pixels are float32 in [0, 1] (raw values divided by 255); resizing uses
bilinear interpolation.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import imageio
from .tensor import Tensor

__all__ = [
    "LabeledImage",
    "ClassMap",
    "Dataset",
    "SplitSpec",
    "AugmentSpec",
    "DataError",
    "load_dataset",
    "split",
    "augment",
    "flip_horizontal",
    "rotate",
    "resize_bilinear",
    "gen_synthetic",
    "write_dataset",
    "batch_iter",
]

CLASS_MAP_FILENAME = "classes.txt"


class DataError(ValueError):
    """Dataset-level contract violation (layout, labels, sizes)."""


@dataclass
class LabeledImage:
    """A decoded image with pixels in [0, 1] and its integer class id."""

    pixels: np.ndarray  # H x W x C float32
    label: int
    source_path: str | None = None

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or min(p.shape) <= 0:
            raise DataError(f"pixels must be H x W x C, got shape {p.shape}")
        if p.min() < 0.0 or p.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")


class ClassMap:
    """Ordered class names; ids are the positions 0..K-1."""

    def __init__(self, names):
        names = list(names)
        if len(set(names)) != len(names):
            raise DataError(f"duplicate class names: {names}")
        if not names:
            raise DataError("class map needs at least one class")
        self.names = names

    def __len__(self) -> int:
        return len(self.names)

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassMap) and self.names == other.names

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown class name {name!r}") from None

    def name_of(self, class_id: int) -> str:
        return self.names[class_id]

    @classmethod
    def from_file(cls, path: str) -> "ClassMap":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(f"{path}:{lineno}: expected name=id, got {line!r}")
                name, _, id_text = line.partition("=")
                pairs.append((int(id_text.strip()), name.strip()))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DataError(f"{path}: ids must be 0..K-1, got {[i for i, _ in pairs]}")
        return cls([name for _, name in pairs])

    def to_file(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, name in enumerate(self.names):
                fh.write(f"{name}={i}\n")


class Dataset:
    """A list of labeled images plus the class-name mapping."""

    def __init__(self, images: list[LabeledImage], class_map: ClassMap):
        for img in images:
            if not 0 <= img.label < len(class_map):
                raise DataError(
                    f"label {img.label} outside [0, {len(class_map)}) "
                    f"for {img.source_path}"
                )
        self.images = images
        self.class_map = class_map

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return self.images[i]

    def __iter__(self):
        return iter(self.images)

    def labels(self) -> np.ndarray:
        return np.array([img.label for img in self.images], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.images[i] for i in indices], self.class_map)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.class_map), dtype=np.int64)
        for img in self.images:
            counts[img.label] += 1
        return counts


@dataclass
class SplitSpec:
    """Train/validation/test partition: ``test_fraction`` of the whole set
    becomes test, then ``validation_fraction_of_train`` of the remainder
    becomes validation."""

    test_fraction: float = 0.2
    validation_fraction_of_train: float = 0.1
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        for name in ("test_fraction", "validation_fraction_of_train"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise DataError(f"{name} must be in (0, 1), got {value}")


@dataclass
class AugmentSpec:
    """Random-augmentation magnitudes. All-zero magnitudes (with flipping
    disabled) make :func:`augment` the identity."""

    horizontal_flip: bool = True
    rotation_degrees: float = 15.0
    zoom_fraction: float = 0.10
    width_shift_fraction: float = 0.10
    height_shift_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("rotation_degrees", "zoom_fraction",
                     "width_shift_fraction", "height_shift_fraction"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be nonnegative")
        if self.zoom_fraction >= 1.0:
            raise DataError("zoom_fraction must be below 1")

    def is_identity(self) -> bool:
        return (
            not self.horizontal_flip
            and self.rotation_degrees == 0
            and self.zoom_fraction == 0
            and self.width_shift_fraction == 0
            and self.height_shift_fraction == 0
        )

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(False, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# geometry


def resize_bilinear(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize preserving corner pixels (align-corners mapping).

    An identity-size call returns the input values exactly.
    """
    h, w, c = pixels.shape
    if (h, w) == (out_h, out_w):
        return pixels.astype(np.float32, copy=True)
    src = pixels.astype(np.float32)

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.full(n_out, (n_in - 1) / 2.0, dtype=np.float64)
        return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)

    ys, xs = coords(h, out_h), coords(w, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None, None]
    wx = (xs - x0).astype(np.float32)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    """Mirror columns (exchange left and right)."""
    return np.ascontiguousarray(pixels[:, ::-1, :])


def _affine_sample(pixels: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Bilinear-sample ``pixels`` at source coords ``matrix @ dst + offset``
    for every destination pixel; out-of-range samples clamp to the edge."""
    h, w, _ = pixels.shape
    src = pixels.astype(np.float32)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sy = matrix[0, 0] * ys + matrix[0, 1] * xs + offset[0]
    sx = matrix[1, 0] * ys + matrix[1, 1] * xs + offset[1]
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(np.float32)[:, :, None]
    wx = (sx - x0).astype(np.float32)[:, :, None]
    out = (
        src[y0, x0] * (1 - wy) * (1 - wx)
        + src[y0, x1] * (1 - wy) * wx
        + src[y1, x0] * wy * (1 - wx)
        + src[y1, x1] * wy * wx
    )
    return out


def _warp(pixels: np.ndarray, degrees: float, zoom: float,
          shift_y: float, shift_x: float) -> np.ndarray:
    """Rotate/zoom about the image center, then shift, resampling bilinearly."""
    h, w, _ = pixels.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    inv_zoom = 1.0 / zoom
    # inverse map: undo shift, then rotate by -theta and unscale about center
    matrix = np.array(
        [[cos_t * inv_zoom, -sin_t * inv_zoom],
         [sin_t * inv_zoom, cos_t * inv_zoom]]
    )
    center = np.array([cy, cx])
    offset = center - matrix @ (center + np.array([shift_y, shift_x]))
    return _affine_sample(pixels, matrix, offset)


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center by ``degrees`` (counterclockwise)."""
    return _warp(pixels, degrees, 1.0, 0.0, 0.0)


def augment(image: LabeledImage, spec: AugmentSpec,
            rng: np.random.Generator) -> LabeledImage:
    """Random flip/rotation/zoom/shift per ``spec``. Shape, label, and the
    [0, 1] pixel range are preserved; an all-zero spec is the identity."""
    if spec.is_identity():
        return LabeledImage(image.pixels.copy(), image.label, image.source_path)
    pixels = image.pixels
    h, w, _ = pixels.shape
    if spec.horizontal_flip and rng.random() < 0.5:
        pixels = flip_horizontal(pixels)
    degrees = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees) \
        if spec.rotation_degrees else 0.0
    zoom = 1.0 + rng.uniform(-spec.zoom_fraction, spec.zoom_fraction) \
        if spec.zoom_fraction else 1.0
    shift_x = rng.uniform(-spec.width_shift_fraction, spec.width_shift_fraction) * w \
        if spec.width_shift_fraction else 0.0
    shift_y = rng.uniform(-spec.height_shift_fraction, spec.height_shift_fraction) * h \
        if spec.height_shift_fraction else 0.0
    if degrees or zoom != 1.0 or shift_x or shift_y:
        pixels = _warp(pixels, degrees, zoom, shift_y, shift_x)
    return LabeledImage(np.clip(pixels, 0.0, 1.0).astype(np.float32),
                        image.label, image.source_path)


# ---------------------------------------------------------------------------
# loading


def load_dataset(root_dir: str, class_map: ClassMap | None = None,
                 target_size: tuple[int, int] = (72, 72)) -> Dataset:
    """Load ``root/<class>/<image>`` trees: decode, bilinear-resize to
    ``target_size``, scale by 1/255, and label by directory.

    Files are visited in sorted order so the dataset ordering is
    deterministic. Unknown class directories, undecodable files, and empty
    classes are errors.
    """
    if not os.path.isdir(root_dir):
        raise DataError(f"dataset root {root_dir!r} is not a directory")
    if class_map is None:
        map_path = os.path.join(root_dir, CLASS_MAP_FILENAME)
        if os.path.isfile(map_path):
            class_map = ClassMap.from_file(map_path)
        else:
            names = sorted(
                d for d in os.listdir(root_dir)
                if os.path.isdir(os.path.join(root_dir, d))
            )
            if not names:
                raise DataError(f"no class directories under {root_dir}")
            class_map = ClassMap(names)

    dirs = sorted(
        d for d in os.listdir(root_dir)
        if os.path.isdir(os.path.join(root_dir, d))
    )
    unknown = [d for d in dirs if d not in class_map.names]
    if unknown:
        raise DataError(f"unknown class directories in {root_dir}: {unknown}")

    out_h, out_w = target_size
    images = []
    for name in class_map.names:
        class_dir = os.path.join(root_dir, name)
        if not os.path.isdir(class_dir):
            raise DataError(f"class {name!r} has no directory under {root_dir}")
        label = class_map.id_of(name)
        files = sorted(
            f for f in os.listdir(class_dir)
            if f.lower().endswith(imageio.IMAGE_EXTENSIONS)
        )
        if not files:
            raise DataError(f"class {name!r} is empty under {root_dir}")
        for fname in files:
            path = os.path.join(class_dir, fname)
            raw = imageio.read_image(path)  # raises DecodeError naming the file
            pixels = resize_bilinear(raw.astype(np.float32), out_h, out_w) / 255.0
            pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
            images.append(LabeledImage(pixels, label, path))
    return Dataset(images, class_map)


def write_dataset(dataset: Dataset, root_dir: str, ext: str = ".ppm") -> None:
    """Write the standard on-disk layout: one directory per class plus
    ``classes.txt``."""
    os.makedirs(root_dir, exist_ok=True)
    dataset.class_map.to_file(os.path.join(root_dir, CLASS_MAP_FILENAME))
    counters = [0] * len(dataset.class_map)
    for img in dataset:
        name = dataset.class_map.name_of(img.label)
        class_dir = os.path.join(root_dir, name)
        os.makedirs(class_dir, exist_ok=True)
        fname = f"img_{counters[img.label]:05d}{ext}"
        counters[img.label] += 1
        imageio.write_image(os.path.join(class_dir, fname), img.pixels)


# ---------------------------------------------------------------------------
# splitting


def _round_count(fraction: float, n: int) -> int:
    return int(round(fraction * n))


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint, exhaustive (train, validation, test) partition.

    Stratified mode keeps each subset's per-class proportions within one
    sample of the parent's. The assignment is a pure function of the seed.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(dataset)
    if n == 0:
        raise DataError("cannot split an empty dataset")

    if spec.stratified:
        by_class: dict[int, list[int]] = {}
        for i, img in enumerate(dataset):
            by_class.setdefault(img.label, []).append(i)
        train_idx, val_idx, test_idx = [], [], []
        for label in sorted(by_class):
            ids = np.array(by_class[label])
            rng.shuffle(ids)
            n_c = len(ids)
            n_test = _round_count(spec.test_fraction, n_c)
            n_val = _round_count(spec.validation_fraction_of_train, n_c - n_test)
            n_train = n_c - n_test - n_val
            if min(n_test, n_val, n_train) < 1:
                raise DataError(
                    f"class {dataset.class_map.name_of(label)!r} has too few "
                    f"samples ({n_c}) to stratify"
                )
            test_idx.extend(ids[:n_test])
            val_idx.extend(ids[n_test:n_test + n_val])
            train_idx.extend(ids[n_test + n_val:])
    else:
        ids = np.arange(n)
        rng.shuffle(ids)
        n_test = _round_count(spec.test_fraction, n)
        n_val = _round_count(spec.validation_fraction_of_train, n - n_test)
        test_idx = list(ids[:n_test])
        val_idx = list(ids[n_test:n_test + n_val])
        train_idx = list(ids[n_test + n_val:])

    return (
        dataset.subset(sorted(train_idx)),
        dataset.subset(sorted(val_idx)),
        dataset.subset(sorted(test_idx)),
    )


# ---------------------------------------------------------------------------
# synthetic data


def _class_tint(label: int, k: int, channels: int) -> np.ndarray:
    if channels == 1:
        return np.array([0.55 + 0.45 * label / max(k - 1, 1)], dtype=np.float32)
    r, g, b = colorsys.hsv_to_rgb(label / k, 0.65, 1.0)
    return np.array([r, g, b], dtype=np.float32)[:channels]


def gen_synthetic(n_per_class: int, k: int = 4,
                  size: tuple[int, int, int] = (72, 72, 3),
                  seed: int = 0) -> Dataset:
    """Procedural texture classes: oriented stripes with a class-specific
    color tint plus noise. Classes are separable by a linear probe; the
    stripe phase is randomized per image so raw-pixel memorization of a
    single template is impossible."""
    if n_per_class < 1:
        raise DataError("n_per_class must be at least 1")
    h, w, c = size
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    period = max(h, w) / 6.0  # a few patches per stripe cycle
    images = []
    for label in range(k):
        theta = math.pi * label / k
        axis = xs * math.cos(theta) + ys * math.sin(theta)
        tint = _class_tint(label, k, c)
        for _ in range(n_per_class):
            phase = rng.uniform(0.0, 2.0 * math.pi)
            stripes = 0.5 + 0.42 * np.sin(2.0 * math.pi * axis / period + phase)
            pixels = stripes[:, :, None] * tint[None, None, :]
            pixels = pixels + rng.normal(0.0, 0.04, size=(h, w, c))
            pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
            images.append(LabeledImage(pixels, label))
    class_map = ClassMap([f"class{i}" for i in range(k)])
    return Dataset(images, class_map)


# ---------------------------------------------------------------------------
# batching


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0, augment_spec: AugmentSpec | None = None):
    """Yield ``(images, labels)`` tensors covering every sample exactly once.

    The visiting order is a pure function of ``(shuffle_seed, epoch)``; with
    ``shuffle_seed=None`` the dataset order is kept. The final partial batch
    is emitted. Augmentation, when given, is applied on the fly with an RNG
    seeded from ``(augment_spec.seed, epoch)``.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise DataError("cannot iterate an empty dataset")
    order = np.arange(n)
    if shuffle_seed is not None:
        np.random.default_rng([shuffle_seed, epoch]).shuffle(order)
    aug_rng = None
    if augment_spec is not None and not augment_spec.is_identity():
        aug_rng = np.random.default_rng([augment_spec.seed, epoch])
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        imgs = []
        labels = np.empty(len(chunk), dtype=np.int64)
        for j, idx in enumerate(chunk):
            img = dataset[int(idx)]
            if aug_rng is not None:
                img = augment(img, augment_spec, aug_rng)
            imgs.append(img.pixels)
            labels[j] = img.label
        yield Tensor(np.stack(imgs)), Tensor(labels)

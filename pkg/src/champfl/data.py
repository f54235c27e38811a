"""Datasets, IID sharding and backdoor trigger/poison helpers."""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledImage:
    pixels: np.ndarray  # (channels, H, W) in [0, 1]
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Images stored as one (n, C, H, W) float64 array plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or labels.shape != (images.shape[0],):
            raise InputError(f"images {images.shape} / labels {labels.shape} are inconsistent")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise InputError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> LabeledImage:
        return LabeledImage(self.images[i], int(self.labels[i]))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_count)

    @classmethod
    def from_items(cls, items, class_count: int) -> "Dataset":
        items = list(items)
        if not items:
            raise InputError("no items")
        return cls(np.stack([it.pixels for it in items]), np.array([it.label for it in items]), class_count)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


# --------------------------------------------------------------------------- ingestion


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(raw) < need:
        raise FormatError(f"{path}: truncated header, {len(raw)} bytes at offset 0 (need {need})")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", raw[4:need])


def idx_image_shape(images_path) -> tuple[int, int, int]:
    """(1, rows, cols) from an IDX image file header, without reading the pixels."""
    raw = _read_maybe_gzip(images_path)
    _, rows, cols = _idx_header(raw, images_path, IDX_IMAGES_MAGIC, 3)
    return (1, rows, cols)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (raw or gzipped); pixels are scaled by 1/255."""
    img_raw = _read_maybe_gzip(images_path)
    lbl_raw = _read_maybe_gzip(labels_path)
    n_img, rows, cols = _idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lbl,) = _idx_header(lbl_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lbl:
        raise FormatError(f"{images_path}: {n_img} images at offset 4 but {labels_path} has {n_lbl} labels")
    pix_bytes = n_img * rows * cols
    if len(img_raw) < 16 + pix_bytes:
        raise FormatError(f"{images_path}: truncated pixel data at offset {len(img_raw)}, need {16 + pix_bytes}")
    if len(lbl_raw) < 8 + n_lbl:
        raise FormatError(f"{labels_path}: truncated label data at offset {len(lbl_raw)}, need {8 + n_lbl}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, count=pix_bytes, offset=16)
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n_lbl, offset=8).astype(np.int64)
    images = pixels.reshape(n_img, 1, rows, cols).astype(np.float64) / 255.0
    if class_count is None:
        class_count = max(10, int(labels.max()) + 1) if n_lbl else 10
    return Dataset(images, labels, class_count)


def write_idx(images_path, labels_path, images_u8, labels_u8, compress: bool = False) -> None:
    """Write uint8 arrays (n, rows, cols) / (n,) as an IDX pair."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images_u8.tobytes()
    lbl = struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)) + labels_u8.tobytes()
    opener = gzip.compress if compress else (lambda b: b)
    Path(images_path).write_bytes(opener(img))
    Path(labels_path).write_bytes(opener(lbl))


def gen_synthetic(seed, classes: int, per_class: int, shape=(1, 12, 12), noise: float = 0.35, blobs: int = 3, overlap: float = 0.0, label_noise: float = 0.0) -> Dataset:
    """Gaussian class blobs rendered as images.

    Each class owns a template made of ``blobs`` Gaussian bumps placed away from
    the border; items are template plus i.i.d. pixel noise, clipped to [0, 1].
    Noise is scaled by the template's local intensity, so the background stays
    near zero as it does in centred digit or clothing scans. ``overlap`` in
    [0, 1) blends every template toward the class mean, which makes classes
    confusable. ``label_noise`` reassigns that fraction of labels uniformly at
    random, which caps attainable accuracy without making any class pair
    look alike.
    """
    if classes < 2:
        raise InputError("classes must be >= 2")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    margin_y, margin_x = max(1, h // 4), max(1, w // 4)
    templates = np.zeros((classes, c, h, w))
    for k in range(classes):
        for _ in range(blobs):
            cy = rng.uniform(margin_y, h - 1 - margin_y)
            cx = rng.uniform(margin_x, w - 1 - margin_x)
            sigma = rng.uniform(0.08, 0.16) * min(h, w)
            amp = rng.uniform(0.5, 1.0, size=c)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
            templates[k] += amp[:, None, None] * bump
    templates = np.clip(templates, 0.0, 1.0)
    if not 0.0 <= overlap < 1.0:
        raise InputError("overlap must lie in [0, 1)")
    templates = (1.0 - overlap) * templates + overlap * templates.mean(axis=0)
    labels = np.repeat(np.arange(classes), per_class)
    envelope = templates / (templates + 0.05)
    images = templates[labels] + envelope[labels] * rng.normal(0.0, noise, size=(len(labels), c, h, w))
    if not 0.0 <= label_noise <= 1.0:
        raise InputError("label_noise must lie in [0, 1]")
    flip = rng.random(len(labels)) < label_noise
    labels = np.where(flip, rng.integers(0, classes, size=len(labels)), labels)
    order = rng.permutation(len(labels))
    return Dataset(np.clip(images[order], 0.0, 1.0), labels[order], classes)


def train_test_split(ds: Dataset, test_fraction: float, seed) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_test = int(math.floor(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def partition_iid(ds: Dataset, n: int, seed) -> list[Dataset]:
    """Seeded permutation cut into ``n`` contiguous shards of near-equal size."""
    if n <= 0:
        raise InputError("number of shards must be positive")
    if len(ds) < n:
        raise InputError(f"cannot split {len(ds)} items into {n} shards")
    order = np.random.default_rng(seed).permutation(len(ds))
    return [ds.subset(part) for part in np.array_split(order, n)]


# --------------------------------------------------------------------------- backdoors


@dataclass(frozen=True)
class BackdoorSpec:
    source_class: int
    target_class: int
    size: int = 3
    pixel_value: float = 1.0
    origin: tuple[int, int] = (0, 0)
    mode: str = "targeted"  # or "untargeted"

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise InputError(f"unknown backdoor mode {self.mode!r}")
        if self.size < 1:
            raise InputError("trigger size must be >= 1")
        if self.mode == "targeted" and self.source_class == self.target_class:
            raise InputError("target class must differ from source class")
        if not 0.0 <= self.pixel_value <= 1.0:
            raise InputError("trigger pixel value must lie in [0, 1]")

    def check_fits(self, shape) -> None:
        _, h, w = shape
        r, c = self.origin
        if r < 0 or c < 0 or r + self.size > h or c + self.size > w:
            raise InputError(f"{self.size}x{self.size} trigger at {self.origin} does not fit in {h}x{w}")


def stamp(images: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    """Copy of an (n, C, H, W) batch with the trigger block set on every channel."""
    spec.check_fits(images.shape[1:])
    out = np.array(images, dtype=np.float64, copy=True)
    r, c = spec.origin
    out[:, :, r : r + spec.size, c : c + spec.size] = spec.pixel_value
    return out


def apply_trigger(img: LabeledImage, spec: BackdoorSpec) -> LabeledImage:
    return LabeledImage(stamp(img.pixels[None], spec)[0], img.label)


def poison_indices(ds: Dataset, spec: BackdoorSpec, p: float, seed) -> np.ndarray:
    """Indices of the floor(p * #source) source-class items chosen for poisoning."""
    if not 0.0 <= p <= 1.0:
        raise InputError("poison fraction must lie in [0, 1]")
    source = np.flatnonzero(ds.labels == spec.source_class)
    count = int(math.floor(p * len(source) + 1e-9))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.random.default_rng(seed).permutation(source)[:count]
    return np.sort(chosen)


def poison_dataset(ds: Dataset, spec: BackdoorSpec, p: float, seed) -> Dataset:
    """Trigger and relabel a seeded p-fraction of source-class items.

    Targeted mode relabels to ``spec.target_class``; untargeted mode draws a
    label uniformly from every class except the source, per item.
    """
    idx = poison_indices(ds, spec, p, seed)
    if idx.size == 0:
        return ds
    spec.check_fits(ds.shape)
    images = ds.images.copy()
    labels = ds.labels.copy()
    images[idx] = stamp(images[idx], spec)
    if spec.mode == "targeted":
        labels[idx] = spec.target_class
    else:
        others = np.array([k for k in range(ds.class_count) if k != spec.source_class])
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        labels[idx] = rng.choice(others, size=idx.size)
    return Dataset(images, labels, ds.class_count)


def backdoor_testset(test: Dataset, spec: BackdoorSpec) -> Dataset:
    """All source-class items of ``test`` with the trigger applied; labels kept."""
    idx = np.flatnonzero(test.labels == spec.source_class)
    if idx.size == 0:
        raise InputError(f"no samples of source class {spec.source_class} in the test set")
    return Dataset(stamp(test.images[idx], spec), test.labels[idx], test.class_count)

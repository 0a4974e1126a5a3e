"""Dataset ingestion, augmentation and batching.

Supports the CIFAR-10 binary batches (3073-byte records: one label byte then
3072 pixel bytes, channel-planar R, G, B), the big-endian IDX files of the
MNIST family, and a procedurally generated image set for offline smoke runs.
"""

from __future__ import annotations

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
DATA_ENV = "CDS_DATA_DIR"

NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "mnist": ((0.1307, 0.1307, 0.1307), (0.3081, 0.3081, 0.3081)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}


@dataclass
class ImageDataset:
    images: np.ndarray  # [M x C x H x W] in [0, 1]
    labels: np.ndarray  # int64 [M]
    class_count: int
    name: str = "dataset"
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices], self.class_count, self.name, self.split)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# binary formats
# ---------------------------------------------------------------------------


def parse_cifar10(blob: bytes, name: str = "cifar10", split: str = "train") -> ImageDataset:
    if len(blob) % CIFAR_RECORD:
        whole = len(blob) // CIFAR_RECORD
        raise FormatError(f"CIFAR-10 data is not a whole number of 3073-byte records: "
                          f"record {whole} starting at offset {whole * CIFAR_RECORD} is "
                          f"{len(blob) - whole * CIFAR_RECORD} bytes long")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label byte {labels[bad]} > 9 at offset {bad * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return ImageDataset(images, labels, 10, name, split)


def serialize_cifar10(ds: ImageDataset) -> bytes:
    pix = np.rint(ds.images.reshape(len(ds), -1) * 255.0).astype(np.uint8)
    if pix.shape[1] != CIFAR_PIXELS:
        raise DataError(f"images of shape {ds.images.shape[1:]} cannot be written as CIFAR-10 records")
    out = np.empty((len(ds), CIFAR_RECORD), dtype=np.uint8)
    out[:, 0] = ds.labels
    out[:, 1:] = pix
    return out.tobytes()


def parse_idx(blob: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file (labels or images) into a uint8 array."""
    if len(blob) < 4:
        raise FormatError("IDX data shorter than its magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise FormatError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:head])
    expected = int(np.prod(dims, dtype=np.int64))
    if len(blob) - head != expected:
        raise FormatError(f"IDX header promises {expected} data bytes, file has {len(blob) - head}")
    return np.frombuffer(blob, dtype=np.uint8, offset=head).reshape(dims).copy()


def serialize_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 1:
        magic = IDX_LABELS
    elif arr.ndim == 3:
        magic = IDX_IMAGES
    else:
        raise FormatError(f"IDX writer supports 1-D labels or 3-D images, got {arr.ndim}-D")
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def resolve_data_dir(data_dir: str | None) -> str:
    d = data_dir or os.environ.get(DATA_ENV)
    if not d:
        raise DataError(f"no data directory configured (set data.dir or {DATA_ENV})")
    if not os.path.isdir(d):
        raise DataError(f"data directory not found: {d}")
    return d


def load_cifar10(data_dir: str | None) -> tuple[ImageDataset, ImageDataset]:
    root = resolve_data_dir(data_dir)
    for cand in (os.path.join(root, "cifar-10-batches-bin"), root):
        if os.path.exists(os.path.join(cand, "test_batch.bin")):
            root = cand
            break
    else:
        raise DataError(f"CIFAR-10 binary batches not found under {root}")
    train_parts = [parse_cifar10(_read(os.path.join(root, f"data_batch_{i}.bin"))) for i in range(1, 6)]
    train = ImageDataset(np.concatenate([p.images for p in train_parts]),
                         np.concatenate([p.labels for p in train_parts]), 10, "cifar10", "train")
    test = parse_cifar10(_read(os.path.join(root, "test_batch.bin")), split="test")
    return train, test


def _mnist_to_rgb32(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float32)[:, None] / 255.0
    x = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)))
    return np.repeat(x, 3, axis=1)


def load_mnist(data_dir: str | None) -> tuple[ImageDataset, ImageDataset]:
    root = resolve_data_dir(data_dir)
    if os.path.isdir(os.path.join(root, "mnist")):
        root = os.path.join(root, "mnist")
    out = []
    for split, prefix in (("train", "train"), ("test", "t10k")):
        img = parse_idx(_read(os.path.join(root, f"{prefix}-images-idx3-ubyte")))
        lab = parse_idx(_read(os.path.join(root, f"{prefix}-labels-idx1-ubyte")))
        if img.shape[0] != lab.shape[0]:
            raise FormatError(f"{split}: {img.shape[0]} images but {lab.shape[0]} labels")
        out.append(ImageDataset(_mnist_to_rgb32(img), lab, 10, "mnist", split))
    return out[0], out[1]


def make_synthetic(n: int, num_classes: int = 10, size: int = 32, seed: int = 0,
                   split: str = "train") -> ImageDataset:
    """Class-conditional textured images for runs without downloaded data.

    Each class owns an oriented grating frequency and a base hue; samples vary
    in phase, translation, contrast, colour and additive noise, so the task is
    learnable but not trivial. Hue carries part of the label, so colour
    augmentation makes it harder rather than easier.
    """
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    cls_rng = np.random.default_rng(1234)
    angles = np.linspace(0, np.pi, num_classes, endpoint=False)
    freqs = cls_rng.uniform(1.5, 4.0, size=num_classes)
    hues = cls_rng.uniform(0.2, 0.8, size=(num_classes, 3))
    labels = rng.integers(0, num_classes, size=n)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    images = np.empty((n, 3, size, size), dtype=np.float32)
    for k in range(n):
        c = labels[k]
        a = angles[c] + rng.normal(0, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freqs[c] * (np.cos(a) * xx + np.sin(a) * yy) + phase)
        blob_y, blob_x = rng.uniform(0.2, 0.8, size=2)
        blob = np.exp(-((yy - blob_y) ** 2 + (xx - blob_x) ** 2) / 0.05)
        contrast = rng.uniform(0.15, 0.35)
        colour = np.clip(hues[c] + rng.normal(0, 0.2, size=3), 0.05, 0.95)
        img = colour[:, None, None] + contrast * wave[None] * (0.5 + blob[None])
        img += rng.normal(0, 0.08, size=img.shape)
        images[k] = np.clip(img, 0, 1)
    return ImageDataset(images, labels, num_classes, "synthetic", split)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugPolicy:
    crop_pad: int = 4
    flip_p: float = 0.5
    jitter_strength: float = 0.4
    jitter_p: float = 0.8
    gray_p: float = 0.2
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.25, 0.25, 0.25)

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")

    @classmethod
    def empty(cls, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)) -> "AugPolicy":
        return cls(crop_pad=0, flip_p=0.0, jitter_strength=0.0, jitter_p=0.0, gray_p=0.0, mean=mean, std=std)

    @classmethod
    def standard(cls, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)) -> "AugPolicy":
        """Crop and flip only; used for single-view supervised training."""
        return cls(crop_pad=4, flip_p=0.5, jitter_strength=0.0, jitter_p=0.0, gray_p=0.0, mean=mean, std=std)

    @property
    def channels(self) -> int:
        return len(self.mean)


_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _luma(x: np.ndarray) -> np.ndarray:
    if x.shape[1] != 3:
        return x.mean(axis=1, keepdims=True)
    return np.tensordot(x, _GRAY, axes=([1], [0]))[:, None]


def normalize(images: np.ndarray, policy: AugPolicy) -> np.ndarray:
    mean = np.asarray(policy.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(policy.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((images - mean) / std).astype(np.float32)


def augment(images: np.ndarray, policy: AugPolicy, rng: np.random.Generator) -> np.ndarray:
    """One random draw of the policy per image, then normalization."""
    x = np.array(images, dtype=np.float32, copy=True)
    n, c, h, w = x.shape
    if policy.crop_pad > 0:
        p = policy.crop_pad
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        oy = rng.integers(0, 2 * p + 1, size=n)
        ox = rng.integers(0, 2 * p + 1, size=n)
        for k in range(n):
            x[k] = padded[k, :, oy[k]:oy[k] + h, ox[k]:ox[k] + w]
    if policy.flip_p > 0:
        flip = rng.random(n) < policy.flip_p
        x[flip] = x[flip, :, :, ::-1]
    if policy.jitter_p > 0 and policy.jitter_strength > 0:
        s = policy.jitter_strength
        on = rng.random(n) < policy.jitter_p
        factors = rng.uniform(1 - s, 1 + s, size=(n, 3)).astype(np.float32)
        factors[~on] = 1.0
        view = (n, 1, 1, 1)
        x = np.clip(x * factors[:, 0].reshape(view), 0, 1)
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        x = np.clip(mu + (x - mu) * factors[:, 1].reshape(view), 0, 1)
        g = _luma(x)
        x = np.clip(g + (x - g) * factors[:, 2].reshape(view), 0, 1)
    if policy.gray_p > 0:
        gray = rng.random(n) < policy.gray_p
        if gray.any():
            x[gray] = np.repeat(_luma(x[gray]), c, axis=1)
    return normalize(x, policy)


def two_view_augment(image: np.ndarray, policy: AugPolicy, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(rng_seed)
    batch = np.asarray(image, dtype=np.float32)[None]
    return augment(batch, policy, rng)[0], augment(batch, policy, rng)[0]


def make_batch(dataset: ImageDataset, indices, policy: AugPolicy, seed) -> tuple[np.ndarray, np.ndarray]:
    indices = np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return augment(dataset.images[indices], policy, rng), dataset.labels[indices]


def make_contrastive_batch(dataset: ImageDataset, indices, policy: AugPolicy,
                           seed) -> tuple[np.ndarray, np.ndarray]:
    """Stack two independent views so rows i and N+i come from image i."""
    indices = np.asarray(indices, dtype=np.int64)
    rng = np.random.default_rng(seed)
    images = dataset.images[indices]
    v1 = augment(images, policy, rng)
    v2 = augment(images, policy, rng)
    return np.concatenate([v1, v2]), dataset.labels[indices]


def epoch_batches(n: int, batch_size: int, seed, epoch: int) -> list[np.ndarray]:
    """A seeded permutation of range(n) cut into consecutive batches."""
    perm = np.random.default_rng([int(s) for s in np.atleast_1d(seed)] + [epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# semi-supervised split
# ---------------------------------------------------------------------------


@dataclass
class SemiSplit:
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    fraction: float
    seed: int


def semi_split(dataset: ImageDataset, fraction: float, seed: int) -> SemiSplit:
    """Stratified labeled/unlabeled partition with round(fraction * n_c) labels per class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    labeled = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            continue
        k = int(np.floor(fraction * members.size + 0.5))
        if k == 0:
            warnings.warn(f"class {c} receives no labeled samples at fraction {fraction}")
        labeled.append(rng.permutation(members)[:k])
    lab = np.sort(np.concatenate(labeled)) if labeled else np.empty(0, dtype=np.int64)
    mask = np.zeros(len(dataset), dtype=bool)
    mask[lab] = True
    return SemiSplit(lab, np.flatnonzero(~mask), fraction, seed)


# ---------------------------------------------------------------------------
# config-driven loading
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    name: str = "cifar10"
    dir: str | None = None
    train_subset: int | None = None
    test_subset: int | None = None
    subset_seed: int = 0
    synthetic_train: int = 512
    synthetic_test: int = 256
    image_size: int = 32
    num_classes: int = 10
    norm_mean: list[float] | None = None
    norm_std: list[float] | None = None

    def norm_constants(self) -> tuple[tuple, tuple]:
        mean, std = NORMALIZATION.get(self.name, NORMALIZATION["synthetic"])
        return tuple(self.norm_mean or mean), tuple(self.norm_std or std)


def stratified_subset(ds: ImageDataset, count: int | None, seed: int) -> ImageDataset:
    """The first ``count`` items of a seeded class-balanced interleaving."""
    if count is None or count >= len(ds):
        return ds
    rng = np.random.default_rng(seed)
    per_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.class_count)]
    order = []
    depth = max((len(p) for p in per_class), default=0)
    for j in range(depth):
        order.extend(int(p[j]) for p in per_class if j < len(p))
    return ds.subset(np.sort(np.array(order[:count], dtype=np.int64)))


def load_datasets(cfg: DataConfig) -> tuple[ImageDataset, ImageDataset]:
    if cfg.name == "synthetic":
        train = make_synthetic(cfg.synthetic_train, cfg.num_classes, cfg.image_size, cfg.subset_seed, "train")
        test = make_synthetic(cfg.synthetic_test, cfg.num_classes, cfg.image_size, cfg.subset_seed, "test")
    elif cfg.name == "cifar10":
        train, test = load_cifar10(cfg.dir)
    elif cfg.name == "mnist":
        train, test = load_mnist(cfg.dir)
    else:
        raise DataError(f"unknown dataset {cfg.name!r}")
    return (stratified_subset(train, cfg.train_subset, cfg.subset_seed),
            stratified_subset(test, cfg.test_subset, cfg.subset_seed + 1))


"""Dataset ingestion and sampling.

Covers the two supported sources — CIFAR-10 binary batches and a
directory-per-class folder of binary PPM images — plus deterministic
stratified splitting, the rotating 10-fold plan, optional horizontal-flip
augmentation, and seeded batch iteration.  Images live in memory as
float32 NCHW scaled to [0, 1]; per-channel mean subtraction is applied by
the training/eval code, not here.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR10_RECORD_BYTES = 3073  # 1 label byte + 32*32 pixels * 3 planes
AUGMENT_POLICIES = ("none", "horizontal-flip")


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) float32 in [0, 1]
    label: int


@dataclass
class Dataset:
    """Images stacked (M, 3, H, W) float32 with integer labels (M,)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: list[str] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(image=self.images[i:i + 1], label=int(self.labels[i]))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass
class SplitSpec:
    """Pairwise-disjoint index lists into one dataset."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------


def _load_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    expected = CIFAR10_RECORDS_PER_FILE * CIFAR10_RECORD_BYTES
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(
        CIFAR10_RECORDS_PER_FILE, CIFAR10_RECORD_BYTES
    )
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label byte {labels[bad[0]]} > 9 at record {bad[0]}")
    # per record: 1024 red, 1024 green, 1024 blue bytes, each plane row-major
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the six standard binary batch files into (train, test) datasets."""
    train_parts = [_load_cifar10_file(os.path.join(directory, name)) for name in CIFAR10_TRAIN_FILES]
    test_images, test_labels = _load_cifar10_file(os.path.join(directory, CIFAR10_TEST_FILE))
    train = Dataset(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
        num_classes=10,
    )
    test = Dataset(images=test_images, labels=test_labels, num_classes=10)
    return train, test


def split_cifar10(train_set: Dataset, seed: int) -> SplitSpec:
    """Hold out 1000 images per class for validation; the rest train.

    Requires the full balanced training set (5000 per class); selection is
    a per-class seeded shuffle, so it is deterministic for a given seed.
    """
    counts = train_set.class_counts()
    if len(train_set) != 50000 or not np.all(counts == 5000):
        raise ValidationError(
            f"expected 50000 samples with 5000 per class, got {len(train_set)} "
            f"with per-class counts {counts.tolist()}"
        )
    rng = np.random.default_rng(seed)
    val_parts, train_parts = [], []
    for c in range(train_set.num_classes):
        idx = np.nonzero(train_set.labels == c)[0]
        perm = rng.permutation(idx)
        val_parts.append(perm[:1000])
        train_parts.append(perm[1000:])
    return SplitSpec(
        train=np.sort(np.concatenate(train_parts)),
        val=np.sort(np.concatenate(val_parts)),
        test=np.empty(0, dtype=np.int64),
        seed=seed,
    )


def stratified_split(dataset: Dataset, val_fraction: float, seed: int) -> SplitSpec:
    """Per-class seeded split holding out round(val_fraction * count) (>= 1) per class."""
    if not 0.0 < val_fraction < 1.0:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    val_parts, train_parts = [], []
    for c in range(dataset.num_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        if idx.size < 2:
            raise ValidationError(f"class {c} has {idx.size} samples; need at least 2 to split")
        n_val = min(idx.size - 1, max(1, round(val_fraction * idx.size)))
        perm = rng.permutation(idx)
        val_parts.append(perm[:n_val])
        train_parts.append(perm[n_val:])
    return SplitSpec(
        train=np.sort(np.concatenate(train_parts)),
        val=np.sort(np.concatenate(val_parts)),
        test=np.empty(0, dtype=np.int64),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# PPM (P6) image folders
# ---------------------------------------------------------------------------


def _ppm_header_tokens(data: bytes, path) -> tuple[list[int], int]:
    """Parse the three ASCII header integers after the magic; returns (values, offset)."""
    tokens: list[int] = []
    i = 2  # past magic
    while len(tokens) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i] == ord("#"):
            while i < len(data) and data[i] != ord("\n"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError(f"{path}: truncated PPM header")
        token = data[start:i]
        if not token.isdigit():
            raise FormatError(f"{path}: non-numeric PPM header token {token!r}")
        tokens.append(int(token))
    if i >= len(data):
        raise FormatError(f"{path}: missing pixel data")
    return tokens, i + 1  # single whitespace byte separates maxval from pixels


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) PPM into a (H, W, 3) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {data[:2]!r}, expected b'P6')")
    (width, height, maxval), offset = _ppm_header_tokens(data, path)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    need = width * height * 3
    pixels = data[offset:offset + need]
    if len(pixels) != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, got {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValidationError(f"image must be (H, W, 3) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a (C, H, W) array to (C, out_h, out_w).

    Sample positions use half-pixel centers — src = (dst + 0.5)*scale - 0.5
    — clamped to the source grid, so constant images stay exactly constant
    and values never leave the input range.
    """
    c, h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target size must be positive, got {out_h}x{out_w}")

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out.astype(image.dtype, copy=False)


def load_image_folder(directory, target_size: int = 64) -> Dataset:
    """Load class-per-subdirectory PPMs, resized to target_size x target_size.

    Class index is the lexicographic rank of the subdirectory name; files
    within a class are read in sorted order so loading is deterministic.
    """
    class_names = sorted(
        d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d))
    )
    if not class_names:
        raise ValidationError(f"{directory}: no class subdirectories found")
    images, labels = [], []
    for label, name in enumerate(class_names):
        class_dir = os.path.join(directory, name)
        files = sorted(f for f in os.listdir(class_dir) if f.endswith(".ppm"))
        if not files:
            raise ValidationError(f"{class_dir}: class directory contains no .ppm images")
        for fname in files:
            raw = read_ppm(os.path.join(class_dir, fname))
            chw = raw.transpose(2, 0, 1).astype(np.float32) / 255.0
            images.append(bilinear_resize(chw, target_size, target_size))
            labels.append(label)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        num_classes=len(class_names),
        class_names=class_names,
    )


# ---------------------------------------------------------------------------
# 10-fold rotation plan
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Per class, ten deciles of 8 indices; fold i tests D_i and validates D_{i+1 mod 10}."""

    deciles: list[np.ndarray]  # per class: (10, 8) index array
    seed: int
    num_folds: int = 10

    def split(self, fold: int) -> SplitSpec:
        if not 0 <= fold < self.num_folds:
            raise ValidationError(f"fold must be in [0, {self.num_folds}), got {fold}")
        test_parts, val_parts, train_parts = [], [], []
        val_decile = (fold + 1) % self.num_folds
        for class_deciles in self.deciles:
            test_parts.append(class_deciles[fold])
            val_parts.append(class_deciles[val_decile])
            rest = [d for j, d in enumerate(class_deciles) if j not in (fold, val_decile)]
            train_parts.append(np.concatenate(rest))
        return SplitSpec(
            train=np.sort(np.concatenate(train_parts)),
            val=np.sort(np.concatenate(val_parts)),
            test=np.sort(np.concatenate(test_parts)),
            seed=self.seed,
        )


def make_fold_plan(dataset: Dataset, seed: int) -> FoldPlan:
    """Shuffle each class's 80 samples (seeded) and slice into deciles of 8."""
    counts = dataset.class_counts()
    if not np.all(counts == 80):
        raise ValidationError(
            f"fold plan requires exactly 80 samples per class, got {counts.tolist()}"
        )
    rng = np.random.default_rng(seed)
    deciles = []
    for c in range(dataset.num_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        deciles.append(rng.permutation(idx).reshape(10, 8))
    return FoldPlan(deciles=deciles, seed=seed)


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------


def augment(sample: Sample, rng: np.random.Generator, policy: str = "none") -> Sample:
    """Apply the augmentation policy to one sample ("none" is the identity)."""
    if policy not in AUGMENT_POLICIES:
        raise ValidationError(f"unknown augmentation policy {policy!r}, expected {AUGMENT_POLICIES}")
    if policy == "none":
        return sample
    if rng.random() < 0.5:
        return Sample(image=sample.image[..., ::-1].copy(), label=sample.label)
    return sample


def augment_batch(images: np.ndarray, rng: np.random.Generator, policy: str) -> np.ndarray:
    """Batch counterpart of augment; flips each image independently."""
    if policy not in AUGMENT_POLICIES:
        raise ValidationError(f"unknown augmentation policy {policy!r}, expected {AUGMENT_POLICIES}")
    if policy == "none":
        return images
    flip = rng.random(images.shape[0]) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    return out


def batch_iter(dataset: Dataset, indices, batch_size: int, shuffle_seed=None):
    """Yield (images (N,3,H,W), labels (N,)) batches over the given indices.

    shuffle_seed None keeps the given order; any value accepted by
    numpy's default_rng (int or SeedSequence) shuffles deterministically.
    The final short batch is emitted as-is.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    order = np.asarray(indices, dtype=np.int64)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, order.size, batch_size):
        chunk = order[start:start + batch_size]
        yield dataset.images[chunk], dataset.labels[chunk]


def channel_means(dataset: Dataset, indices) -> np.ndarray:
    """Per-channel mean over the selected samples (used for input normalization)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("cannot compute channel means over an empty index list")
    return dataset.images[idx].mean(axis=(0, 2, 3))

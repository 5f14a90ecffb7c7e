"""Dataset loading and synthesis: IDX files, Gaussian blob fallbacks,
symmetric label noise with an exact audit trail, and seeded splits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

# community-standard MNIST normalization constants
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


@dataclass(frozen=True)
class NoiseRecord:
    """Audit trail of one symmetric label-noise injection.

    ``flipped_indices`` is sorted and unique; ``original_labels`` is aligned
    to it, so applying the originals back onto the noisy labels restores the
    clean dataset exactly.
    """

    epsilon: float
    flipped_indices: tuple[int, ...]
    original_labels: tuple[int, ...]
    noise_seed: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if len(self.flipped_indices) != len(self.original_labels):
            raise ValueError("flipped_indices and original_labels must align")
        idx = self.flipped_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("flipped_indices must be sorted and unique")


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix [N, D] (float64) with integer labels in [0, num_classes).

    ``noise`` is None for clean data and carries the NoiseRecord once
    symmetric noise has been injected; the sketch loop uses it to assert
    that test data is never noised.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    noise: NoiseRecord | None = None

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"features must be [N>=1, D], got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ValueError("labels must be a vector aligned with features")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _read_exact(f, count: int, path: Path, what: str) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise ValueError(f"truncated file {path}: expected {count} bytes for {what}, got {len(data)}")
    return data


def _read_be32(f, path: Path, what: str) -> int:
    return struct.unpack(">I", _read_exact(f, 4, path, what))[0]


def load_idx(
    images_path: str | Path,
    labels_path: str | Path,
    limit: int | None = None,
    name: str = "idx",
) -> LabeledDataset:
    """Load an IDX image/label pair into a flattened, standardized dataset.

    Pixels are scaled to [0, 1] and standardized with the MNIST constants
    (mean 0.1307, std 0.3081); images flatten to D = rows * cols.  ``limit``
    truncates to the first samples.
    """
    images_path = Path(images_path)
    labels_path = Path(labels_path)

    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, "image magic")
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(
                f"bad magic in {images_path}: 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path, "image count")
        rows = _read_be32(f, images_path, "row count")
        cols = _read_be32(f, images_path, "column count")
        raw = _read_exact(f, count * rows * cols, images_path, "pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, "label magic")
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(
                f"bad magic in {labels_path}: 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
            )
        label_count = _read_be32(f, labels_path, "label count")
        labels_raw = _read_exact(f, label_count, labels_path, "label data")
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise ValueError(
            f"length mismatch: {images_path} has {count} images but "
            f"{labels_path} has {label_count} labels"
        )
    if limit is not None:
        if limit < 1:
            raise ValueError("limit must be >= 1")
        images = images[:limit]
        labels = labels[:limit]

    features = (images.astype(np.float64) / 255.0 - MNIST_MEAN) / MNIST_STD
    return LabeledDataset(features=features, labels=labels, num_classes=10, name=name)


def save_idx(
    images: np.ndarray,
    labels: np.ndarray,
    images_path: str | Path,
    labels_path: str | Path,
) -> None:
    """Write raw uint8 images [N, rows, cols] and labels [N] as an IDX pair."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be [N, rows, cols], got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ValueError("labels must align with images")
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels.tobytes())


def export_idx(
    ds: LabeledDataset,
    images_path: str | Path,
    labels_path: str | Path,
    rows: int,
    cols: int,
) -> None:
    """Export a dataset to IDX by inverting the MNIST standardization.

    Exact round-trip for datasets that came from uint8 pixel grids; other
    feature values are clipped into [0, 255].
    """
    if ds.dim != rows * cols:
        raise ValueError(f"dataset dim {ds.dim} != rows*cols = {rows * cols}")
    pixels = (ds.features * MNIST_STD + MNIST_MEAN) * 255.0
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8).reshape(ds.size, rows, cols)
    save_idx(images, ds.labels.astype(np.uint8), images_path, labels_path)


def synth_blobs(
    n_per_class: int,
    num_classes: int,
    dim: int,
    separation: float,
    seed: int,
    name: str = "blobs",
) -> LabeledDataset:
    """Gaussian clusters with unit variance, centered on a grid lattice.

    Class c sits at ``separation`` times the coordinates of c unravelled into
    the smallest integer grid holding num_classes points, so nearest centers
    are exactly ``separation`` apart (all coincide when separation is 0).
    """
    if n_per_class < 1 or num_classes < 1 or dim < 1:
        raise ValueError("n_per_class, num_classes and dim must be >= 1")
    side = 1
    while side**dim < num_classes:
        side += 1
    # base-`side` digits of the class index, one digit per axis
    centers = np.zeros((num_classes, dim))
    for c in range(num_classes):
        rem, axis = c, 0
        while rem:
            rem, digit = divmod(rem, side)
            centers[c, axis] = digit
            axis += 1
    centers *= float(separation)

    rng = np.random.Generator(np.random.PCG64(seed))
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), n_per_class)
    features = rng.standard_normal((n, dim)) + centers[labels]
    return LabeledDataset(features=features, labels=labels, num_classes=num_classes, name=name)


def inject_symmetric_noise(
    ds: LabeledDataset, epsilon: float, seed: int
) -> tuple[LabeledDataset, NoiseRecord]:
    """Flip round(epsilon * N) labels, each to a uniformly chosen other class.

    Indices are drawn uniformly without replacement.  The input dataset is
    left untouched; the returned NoiseRecord allows exact reversal.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if epsilon > 0 and ds.num_classes < 2:
        raise ValueError("need at least 2 classes to flip labels")

    n = ds.size
    k = int(round(epsilon * n))
    rng = np.random.Generator(np.random.PCG64(seed))
    flipped = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, dtype=np.int64)
    labels = ds.labels.copy()
    originals = labels[flipped].copy()
    if k:
        # uniform over the other C-1 classes, never the original
        offsets = rng.integers(1, ds.num_classes, size=k)
        labels[flipped] = (originals + offsets) % ds.num_classes
    record = NoiseRecord(
        epsilon=epsilon,
        flipped_indices=tuple(int(i) for i in flipped),
        original_labels=tuple(int(v) for v in originals),
        noise_seed=seed,
    )
    noisy = LabeledDataset(
        features=ds.features,
        labels=labels,
        num_classes=ds.num_classes,
        name=ds.name,
        noise=record,
    )
    return noisy, record


def revert_noise(ds: LabeledDataset, record: NoiseRecord) -> LabeledDataset:
    """Restore the clean labels recorded in a NoiseRecord."""
    labels = ds.labels.copy()
    labels[np.array(record.flipped_indices, dtype=np.int64)] = record.original_labels
    return LabeledDataset(
        features=ds.features, labels=labels, num_classes=ds.num_classes, name=ds.name
    )


def split(
    ds: LabeledDataset, train_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint, exhaustive, seed-deterministic partition into train/test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = ds.size
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"split of {n} samples at fraction {train_fraction} leaves an empty side")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(n)
    tr, te = np.sort(order[:n_train]), np.sort(order[n_train:])

    def take(idx: np.ndarray, tag: str) -> LabeledDataset:
        return LabeledDataset(
            features=ds.features[idx],
            labels=ds.labels[idx],
            num_classes=ds.num_classes,
            name=f"{ds.name}/{tag}",
        )

    return take(tr, "train"), take(te, "test")

"""Labeled image datasets: loading, rotation augmentation, batching, caching."""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DataError, ValidationError
from ..rng import substream
from .idx import load_idx

NUM_CLASSES = 10

# canonical MNIST file names, tried with and without .gz
_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledDataset:
    images: np.ndarray            # [N, H, W, 1] float32 in [0, 1]
    labels: np.ndarray            # [N] int64 in 0..9
    split: str                    # "train" or "test"
    angles: np.ndarray | None = field(default=None)  # rotation provenance, radians

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"images {self.images.shape} do not pair with labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValidationError("labels must lie in 0..9")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, count):
        if count is None or count >= len(self):
            return self
        return LabeledDataset(self.images[:count], self.labels[:count], self.split,
                              None if self.angles is None else self.angles[:count])


def _resolve(data_dir, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise DataError(
        f"missing dataset file {stem}[.gz] in {data_dir}; place the MNIST IDX "
        f"files there or point --data/BVAE_DATA_DIR at them")


def verify_checksums(data_dir):
    """Check sha256 sums listed in <data_dir>/checksums.json, if present."""
    manifest = os.path.join(data_dir, "checksums.json")
    if not os.path.exists(manifest):
        return False
    with open(manifest) as fh:
        expected = json.load(fh)
    for name, want in expected.items():
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise DataError(f"checksums.json lists {name} but it is missing from {data_dir}")
        digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
        if digest != want:
            raise DataError(f"{name}: sha256 {digest} != expected {want}")
    return True


def load_mnist(data_dir, split):
    if split not in _MNIST_FILES:
        raise ConfigError(f"unknown split {split!r}")
    images_stem, labels_stem = _MNIST_FILES[split]
    images, labels = load_idx(_resolve(data_dir, images_stem), _resolve(data_dir, labels_stem))
    return LabeledDataset(images, labels, split)


def rotate_image(img, angle):
    """Rotate one [H, W] image about its center with bilinear sampling.

    Out-of-bounds source pixels read as 0, so values stay within [0, 1].
    """
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    # inverse map: sample the source location that lands on each target pixel
    src_r = cy + (rr - cy) * cos_t + (cc - cx) * sin_t
    src_c = cx - (rr - cy) * sin_t + (cc - cx) * cos_t
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros((h, w), dtype=np.float64)
    for dr, dc, weight in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                           (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r = r0 + dr
        c = c0 + dc
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        vals = np.where(inside, img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], 0.0)
        out += weight * vals
    return out.astype(img.dtype)


def make_rotated_dataset(ds, seed):
    """Rotate every sample by its own fixed uniform [0, 2pi) angle.

    Angles come from the rotation stream of the master seed, sub-indexed by
    split so train and test draw independently; they are stored on the
    returned dataset for provenance.
    """
    split_index = 0 if ds.split == "train" else 1
    rng = substream(seed, "rotation", split_index)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=len(ds))
    rotated = np.empty_like(ds.images)
    for i in range(len(ds)):
        rotated[i, :, :, 0] = rotate_image(ds.images[i, :, :, 0], angles[i])
    return LabeledDataset(rotated, ds.labels.copy(), ds.split, angles)


def one_hot(labels, num_classes=NUM_CLASSES):
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def class_weight_column(labels, class_weights):
    """Per-sample weights from a class->weight map (missing classes weigh 1)."""
    w = np.ones(len(labels), dtype=np.float32)
    if class_weights:
        for cls, weight in class_weights.items():
            if weight <= 0:
                raise ConfigError(f"class weight for {cls} must be positive")
            w[labels == int(cls)] = weight
    return w


def batch_iter(ds, batch_size, seed, epoch, class_weights=None):
    """Yield (images, one_hot, sample_weights, labels) over a seeded shuffle.

    The permutation depends only on (seed, epoch); the final partial batch
    is kept so every epoch covers the dataset exactly once.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = substream(seed, "shuffle", epoch).permutation(len(ds))
    weights = class_weight_column(ds.labels, class_weights)
    targets = one_hot(ds.labels)
    for lo in range(0, len(ds), batch_size):
        idx = order[lo:lo + batch_size]
        yield ds.images[idx], targets[idx], weights[idx], ds.labels[idx]


def save_cache(ds, stem):
    """Write <stem>.bin (raw little-endian float32) + <stem>.json sidecar."""
    data = np.ascontiguousarray(ds.images, dtype="<f4")
    with open(stem + ".bin", "wb") as fh:
        fh.write(data.tobytes())
    sidecar = {
        "shape": list(ds.images.shape),
        "labels": ds.labels.tolist(),
        "split": ds.split,
        "angles": None if ds.angles is None else ds.angles.tolist(),
    }
    with open(stem + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True)


def load_cache(stem):
    with open(stem + ".json") as fh:
        sidecar = json.load(fh)
    shape = tuple(sidecar["shape"])
    count = int(np.prod(shape))
    raw = np.fromfile(stem + ".bin", dtype="<f4")
    if raw.size != count:
        raise DataError(f"{stem}.bin holds {raw.size} floats, sidecar says {count}")
    angles = sidecar.get("angles")
    return LabeledDataset(
        raw.reshape(shape),
        np.asarray(sidecar["labels"], dtype=np.int64),
        sidecar["split"],
        None if angles is None else np.asarray(angles, dtype=np.float64),
    )

"""Per-class fixed output targets: exemplar digits or synthetic patterns.

Synthetic patterns place one shape per class at ten centers evenly spaced
on a circle of radius 9 around the image center, snapped to integer pixels
so peak values are exact.  All targets live in [0, 1].
"""

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError

TARGET_KINDS = ("exemplar", "gaussian", "square", "wavelet")

GAUSSIAN_SIGMA = 2.0
SQUARE_SIDE = 6
WAVELET_SUPPORT = 12   # outer square; a 2-px ring at level 0 wraps the +-1 quadrants
CIRCLE_RADIUS = 9.0


@dataclass
class TargetSet:
    kind: str
    targets: np.ndarray          # [10, H, W, 1] float32 in [0, 1]
    value_range: tuple

    def for_labels(self, labels):
        return self.targets[labels]


def class_centers(image_hw=(28, 28), num_classes=10, radius=CIRCLE_RADIUS):
    h, w = image_hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    centers = []
    for c in range(num_classes):
        theta = 2.0 * np.pi * c / num_classes
        centers.append((int(round(cy - radius * np.cos(theta))),
                        int(round(cx + radius * np.sin(theta)))))
    return centers


def _gaussian_image(center, image_hw):
    h, w = image_hw
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    return np.exp(-d2 / (2.0 * GAUSSIAN_SIGMA ** 2))


def _square_image(center, image_hw):
    h, w = image_hw
    out = np.zeros(image_hw)
    half = SQUARE_SIDE // 2
    r0, c0 = center
    out[max(r0 - half, 0):min(r0 + half, h), max(c0 - half, 0):min(c0 + half, w)] = 1.0
    return out


def _wavelet_image(center, image_hw):
    # signed pattern: +-1 checkerboard quadrants inside an 8x8 core, level-0
    # ring around it; affine map (v+1)/2 puts the support in [0,1], outside
    # the support stays 0 so the shape has a hard edge against the background
    h, w = image_hw
    half = WAVELET_SUPPORT // 2
    signed = np.zeros((WAVELET_SUPPORT, WAVELET_SUPPORT))
    core = WAVELET_SUPPORT - 4
    quad = core // 2
    block = np.ones((quad, quad))
    signed[2:2 + quad, 2:2 + quad] = block
    signed[2:2 + quad, 2 + quad:2 + core] = -block
    signed[2 + quad:2 + core, 2:2 + quad] = -block
    signed[2 + quad:2 + core, 2 + quad:2 + core] = block
    mapped = (signed + 1.0) / 2.0
    out = np.zeros(image_hw)
    r0, c0 = center[0] - half, center[1] - half
    rs, cs = max(r0, 0), max(c0, 0)
    re, ce = min(r0 + WAVELET_SUPPORT, h), min(c0 + WAVELET_SUPPORT, w)
    out[rs:re, cs:ce] = mapped[rs - r0:re - r0, cs - c0:ce - c0]
    return out


def make_target_set(kind, train_ds, seed=0):
    """Build the 10 per-class targets of the requested kind.

    ``exemplar`` picks the first training occurrence of each digit; the
    synthetic kinds are closed-form and ignore the training data.  The seed
    is accepted for interface stability; every kind is deterministic.
    """
    if kind not in TARGET_KINDS:
        raise ConfigError(f"unknown target kind {kind!r}; expected one of {TARGET_KINDS}")
    h, w = train_ds.images.shape[1:3]
    targets = np.zeros((10, h, w, 1), dtype=np.float32)
    if kind == "exemplar":
        for cls in range(10):
            hits = np.nonzero(train_ds.labels == cls)[0]
            if hits.size == 0:
                raise ConfigError(f"training split has no example of class {cls}")
            targets[cls] = train_ds.images[hits[0]]
    else:
        builder = {"gaussian": _gaussian_image, "square": _square_image,
                   "wavelet": _wavelet_image}[kind]
        for cls, center in enumerate(class_centers((h, w))):
            targets[cls, :, :, 0] = builder(center, (h, w))
    return TargetSet(kind, targets, (float(targets.min()), float(targets.max())))

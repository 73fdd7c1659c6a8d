"""Classic baseline augmentations applied jointly to an image and its label."""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError

SCALE_RANGE = (0.8, 1.25)
GAMMA_RANGE = (0.7, 1.5)
ELASTIC_ALPHA = 8.0
ELASTIC_SIGMA = 8.0
METHODS = ("rotation", "scaling", "gamma", "elastic")


@dataclass
class AugmentedSample:
    image: np.ndarray
    label: np.ndarray
    provenance: dict = field(default_factory=dict)


def rotate_quarter(image, label, k):
    """Counter-clockwise rotation by k * 90 degrees (``out[r][c] = in[c][H-1-r]`` for k = 1)."""
    if k not in (1, 2, 3):
        raise ContractError(f"k must be 1, 2 or 3, got {k}")
    image = np.asarray(image)
    if k % 2 and image.shape[0] != image.shape[1]:
        raise DimensionError(f"odd quarter turns need a square image, got {image.shape}")
    return AugmentedSample(np.rot90(image, k).copy(), np.rot90(label, k).copy(),
                           {"method": "rotation", "angle": 90 * k})


def _center_map(shape, factor):
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return [(yy - cy) / factor + cy, (xx - cx) / factor + cx]


def scale_aug(image, label, factor):
    """Zoom about the center by ``factor``; the canvas size is kept (crop or zero-pad)."""
    lo, hi = SCALE_RANGE
    if not lo <= factor <= hi:
        raise ContractError(f"scale factor {factor} outside [{lo}, {hi}]")
    coords = _center_map(np.shape(image), factor)
    img = ndimage.map_coordinates(np.asarray(image, dtype=np.float64), coords, order=1, mode="constant", cval=0.0)
    lab = ndimage.map_coordinates(np.asarray(label), coords, order=0, mode="constant", cval=0)
    return AugmentedSample(np.clip(img, 0, 1).astype(np.float32), lab.astype(np.uint8),
                           {"method": "scaling", "factor": float(factor)})


def gamma_aug(image, label, gamma):
    lo, hi = GAMMA_RANGE
    if not lo <= gamma <= hi:
        raise ContractError(f"gamma {gamma} outside [{lo}, {hi}]")
    img = np.asarray(image, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ContractError("gamma correction expects intensities in [0, 1]")
    return AugmentedSample((img ** gamma).astype(np.float32), np.asarray(label).copy(),
                           {"method": "gamma", "gamma": float(gamma)})


def elastic_field(shape, alpha, sigma, seed):
    """Displacement (dy, dx) = alpha * gaussian_blur(uniform[-1, 1] field)."""
    rng = np.random.default_rng(seed)
    fields = []
    for _ in range(2):
        noise = rng.uniform(-1.0, 1.0, size=shape)
        fields.append(alpha * ndimage.gaussian_filter(noise, sigma, mode="reflect"))
    return fields[0], fields[1]


def elastic_aug(image, label, alpha=ELASTIC_ALPHA, sigma=ELASTIC_SIGMA, seed=0):
    """Random smooth deformation; bilinear for the image, nearest for the label, same field."""
    if alpha < 0 or sigma <= 0:
        raise ContractError(f"need alpha >= 0 and sigma > 0, got alpha={alpha} sigma={sigma}")
    shape = np.shape(image)
    dy, dx = elastic_field(shape, alpha, sigma, seed)
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    coords = [yy + dy, xx + dx]
    img = ndimage.map_coordinates(np.asarray(image, dtype=np.float64), coords, order=1, mode="nearest")
    lab = ndimage.map_coordinates(np.asarray(label), coords, order=0, mode="nearest")
    return AugmentedSample(np.clip(img, 0, 1).astype(np.float32), lab.astype(np.uint8),
                           {"method": "elastic", "alpha": float(alpha), "sigma": float(sigma), "seed": int(seed)})


def augment_dataset(images, labels, method, count_per_image=3, seed=0):
    """Originals plus ``count_per_image`` augmented copies of each slice.

    Returns a list of :class:`AugmentedSample`; ``provenance["source"]`` is
    the input index.
    """
    if method not in METHODS:
        raise ContractError(f"unknown augmentation method {method!r}; choose from {METHODS}")
    rng = np.random.default_rng([seed, METHODS.index(method)])
    out = []
    for idx, (img, lab) in enumerate(zip(images, labels)):
        orig = AugmentedSample(np.asarray(img, dtype=np.float32), np.asarray(lab, dtype=np.uint8),
                               {"method": "original"})
        copies = []
        for j in range(count_per_image):
            if method == "rotation":
                copies.append(rotate_quarter(img, lab, j % 3 + 1))
            elif method == "scaling":
                copies.append(scale_aug(img, lab, rng.uniform(*SCALE_RANGE)))
            elif method == "gamma":
                copies.append(gamma_aug(img, lab, rng.uniform(*GAMMA_RANGE)))
            else:
                copies.append(elastic_aug(img, lab, seed=int(rng.integers(2 ** 32))))
        for s in [orig] + copies:
            s.provenance["source"] = idx
            out.append(s)
    return out


def provenance_line(sample):
    """Manifest-style text for one sample's provenance."""
    prov = sample.provenance
    return "\t".join(f"{k}={prov[k]}" for k in sorted(prov))

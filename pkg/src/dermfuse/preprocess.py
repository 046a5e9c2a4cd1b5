"""Image normalization, bicubic resizing and dihedral augmentation.

All three operations are pure functions on numpy arrays. Rotations and flips
are axis permutations (no resampling), so augmented variants are pixel-exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ValidationError

# Canonical ImageNet training-set mean, RGB order.
IMAGENET_MEAN_RGB = (123.68, 116.779, 103.939)

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class AugmentTag:
    """One of the 8 dihedral variants: a rotation plus an optional flip."""

    rotation: int
    flipped: bool

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValidationError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")

    @property
    def variant_id(self) -> str:
        return f"r{self.rotation}" + ("f" if self.flipped else "")


ALL_TAGS = tuple(AugmentTag(r, f) for r in ROTATIONS for f in (False, True))
IDENTITY_TAG = AugmentTag(0, False)


@dataclass(frozen=True)
class PreprocessedImage:
    """Mean-centered, resized tensor ready for a network, plus provenance."""

    tensor: np.ndarray  # side x side x 3, float
    source_id: str
    variant: AugmentTag

    @property
    def side(self) -> int:
        return self.tensor.shape[0]


def center_rgb(image: np.ndarray, mean_rgb=IMAGENET_MEAN_RGB) -> np.ndarray:
    """Subtract a per-channel mean, returning a float array of the same shape."""
    mean = np.asarray(mean_rgb, dtype=np.float64)
    if mean.shape != (3,) or not np.all(np.isfinite(mean)):
        raise ValidationError(f"mean_rgb must be 3 finite reals, got {mean_rgb!r}")
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected HxWx3 image, got shape {img.shape}")
    return img.astype(np.float64) - mean


def _keys_weight(x: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel with a = -0.5."""
    a = -0.5
    ax = np.abs(x)
    w = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    w[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    w[far] = a * ax[far] ** 3 - 5.0 * a * ax[far] ** 2 + 8.0 * a * ax[far] - 4.0 * a
    return w


@lru_cache(maxsize=32)
def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bicubic sampling matrix along one axis.

    Output sample o maps to source coordinate (o + 0.5) * n_in / n_out - 0.5;
    the 4-tap Keys kernel is evaluated there and out-of-range taps are clamped
    to the edge pixel (their weight accumulates onto it).
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for k in (-1, 0, 1, 2):
        idx = base + k
        w = _keys_weight(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def resize_bicubic(image: np.ndarray, side: int) -> np.ndarray:
    """Resize an HxWxC real image to side x side x C with Keys a=-0.5 bicubic."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h < 2 or w < 2:
        raise ValidationError(f"input too small to resize: {h}x{w}")
    rows = _resize_weights(h, side)
    cols = _resize_weights(w, side)
    # separable: rows first, then columns, per channel
    tmp = np.tensordot(rows, img, axes=(1, 0))  # side x w x c
    out = np.tensordot(tmp, cols, axes=(1, 1))  # side x c x side
    return np.ascontiguousarray(np.moveaxis(out, 1, 2))


def apply_tag(image: np.ndarray, tag: AugmentTag) -> np.ndarray:
    """Apply one dihedral variant: counterclockwise rotation, then horizontal flip."""
    out = np.rot90(image, k=tag.rotation // 90)
    if tag.flipped:
        out = np.flip(out, axis=1)
    return np.ascontiguousarray(out)


def augment(image: np.ndarray) -> list[tuple[AugmentTag, np.ndarray]]:
    """Produce the 8 rotation/flip variants of a square image, tags attached."""
    img = np.asarray(image)
    if img.shape[0] != img.shape[1]:
        raise ValidationError(f"augment requires a square image, got {img.shape[0]}x{img.shape[1]}")
    return [(tag, apply_tag(img, tag)) for tag in ALL_TAGS]


def dump_tensor(path, tensor: np.ndarray) -> None:
    """Debug dump: ASCII shape header line, then row-major little-endian float32."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write((" ".join(str(d) for d in arr.shape) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        shape = tuple(int(tok) for tok in fh.readline().split())
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(shape)

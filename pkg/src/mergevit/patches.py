"""Image-to-token conversion: non-overlapping patch extraction and projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, constant, matmul


@dataclass(frozen=True)
class Image:
    """RGB image with values in [0, 1], stored as a [H_px, W_px, 3] float array."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeError(f"image must be [H, W, 3], got {self.data.shape}")

    @property
    def height_px(self) -> int:
        return self.data.shape[0]

    @property
    def width_px(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3


@dataclass
class TokenMap:
    """A 2-D grid of D-dimensional tokens plus a real-vs-padding mask.

    ``tokens`` is a [h, w, D] Tensor; ``mask`` a float array of {0, 1} where
    1 marks a real token. Padding tokens carry mask 0 and are excluded from
    every pooling and attention computation downstream.
    """

    tokens: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ShapeError(f"tokens must be [h, w, D], got {self.tokens.shape}")
        if self.mask.shape != self.tokens.shape[:2]:
            raise ShapeError(
                f"mask shape {self.mask.shape} does not match tokens {self.tokens.shape}")

    @property
    def h(self) -> int:
        return self.tokens.shape[0]

    @property
    def w(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def all_real(self) -> bool:
        return bool(np.all(self.mask == 1.0))


def patchify_array(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Batched patch extraction on a raw [B, H_px, W_px, C] array.

    Returns [B, H, W, patch_size^2 * C] with H = H_px / patch_size. Each patch
    vector is the row-major (row, col, channel) flattening of its pixel block.
    """
    b, hp, wp, c = images.shape
    if hp % patch_size or wp % patch_size:
        raise ShapeError(
            f"image size {hp}x{wp} not divisible by patch size {patch_size}")
    h, w = hp // patch_size, wp // patch_size
    out = images.reshape(b, h, patch_size, w, patch_size, c)
    out = out.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out.reshape(b, h, w, patch_size * patch_size * c))


def patchify(img: Image, patch_size: int) -> Tensor:
    """Split one image into flattened non-overlapping patches, [H, W, P]."""
    arr = np.asarray(img.data, dtype=np.float64)
    return constant(patchify_array(arr[None], patch_size)[0])


def unpatchify(patches: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of ``patchify`` for a single [H, W, P] patch grid."""
    h, w, p = patches.shape
    c = p // (patch_size * patch_size)
    out = patches.reshape(h, w, patch_size, patch_size, c)
    out = out.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out.reshape(h * patch_size, w * patch_size, c))


def embed(patches: Tensor, w: Tensor, b: Tensor) -> TokenMap:
    """Project patch vectors into tokens: tokens[i,j] = patches[i,j] @ w + b.

    The mask starts all-ones; padding only ever appears later, inside merging.
    """
    if patches.ndim != 3 or patches.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"embed shapes disagree: patches {patches.shape}, w {w.shape}, b {b.shape}")
    h, wd, p = patches.shape
    tokens = matmul(patches.reshape(h * wd, p), w) + b
    return TokenMap(tokens.reshape(h, wd, w.shape[1]), np.ones((h, wd)))

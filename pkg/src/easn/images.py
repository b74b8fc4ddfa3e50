"""Image loading, colour conversion, padding and synthetic test content.

Images live on disk as 8-bit RGB (PNG or PPM via Pillow) and in memory as
float64 NCHW tensors scaled to [0, 1].  Spatial sizes are made divisible by
the model's total downsampling factor with replicate padding on the bottom
and right edges; the original size travels in the bitstream header so the
decoder can crop the padding back off.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .tensor import DomainError, ShapeError, Tensor


def load_image(path) -> np.ndarray:
    """Read any Pillow-supported image as (H, W, 3) uint8 RGB."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_image(path, arr: np.ndarray) -> None:
    """Write (H, W, 3) uint8 RGB; the format comes from the suffix."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    Image.fromarray(arr, "RGB").save(path)


def to_float(img: np.ndarray) -> Tensor:
    """(H, W, 3) uint8 -> (1, 3, H, W) float64 in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3), got {img.shape}")
    return Tensor(img.astype(np.float64).transpose(2, 0, 1)[None] / 255.0)


def to_uint8(x) -> np.ndarray:
    """(1, 3, H, W) in [0, 1] -> (H, W, 3) uint8, clamped, ties away from zero."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 4 or data.shape[0] != 1 or data.shape[1] != 3:
        raise ShapeError(f"expected a single (1, 3, H, W) image, got {data.shape}")
    scaled = np.clip(data[0], 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8).transpose(1, 2, 0)


def replicate_pad(x: Tensor, multiple: int) -> tuple[Tensor, int, int]:
    """Edge-pad bottom/right so H and W divide ``multiple``.

    Returns the padded tensor plus the original height and width.
    """
    if multiple < 1:
        raise DomainError(f"padding multiple must be positive, got {multiple}")
    _, _, h, w = x.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, h, w
    padded = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return Tensor(padded), h, w


def crop_to(x: Tensor, height: int, width: int) -> Tensor:
    """Undo replicate_pad by keeping the top-left height x width window."""
    _, _, h, w = x.shape
    if height > h or width > w or height < 1 or width < 1:
        raise ShapeError(f"cannot crop {h}x{w} to {height}x{width}")
    return Tensor(x.data[:, :, :height, :width].copy())


def synthetic_images(count: int, size: int = 32, seed: int = 0) -> list[np.ndarray]:
    """Deterministic training/test content: gradients, shapes, mild texture.

    Returns ``count`` arrays of shape (size, size, 3) uint8.  Smooth ramps
    and a sinusoid keep the images compressible; rectangles add edges so a
    model has structure to learn.
    """
    if count < 1 or size < 4:
        raise DomainError(f"need count >= 1 and size >= 4, got {count}, {size}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    images = []
    for _ in range(count):
        img = np.empty((size, size, 3))
        for c in range(3):
            gx, gy = rng.uniform(-0.5, 0.5, 2)
            freq = rng.uniform(0.5, 3.0)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            img[..., c] = (0.5 + gx * (xx - 0.5) + gy * (yy - 0.5)
                           + 0.15 * np.sin(2.0 * np.pi * freq * xx + phase))
        for _ in range(int(rng.integers(1, 4))):
            y0, x0 = rng.integers(0, size - 2, 2)
            y1 = int(rng.integers(y0 + 1, size))
            x1 = int(rng.integers(x0 + 1, size))
            img[y0:y1, x0:x1] += rng.uniform(-0.35, 0.35, 3)
        img += rng.normal(0.0, 0.01, img.shape)
        images.append(np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    return images

"""Evaluation metrics and feature-map inspection.

PSNR/bpp feed rate-distortion CSVs; the high-frequency map shows what the
scaling branches of the normalization layers respond to: each channel minus
its own 3x3 mean filter, averaged over channels.  Replicate padding makes
the filter exact at borders, so constant inputs map to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import CompressionModel
from .entropy import quantize_round
from .fileio import atomic_write_bytes, atomic_write_text
from .images import replicate_pad, to_float
from .tensor import DomainError, ShapeError, Tensor


@dataclass(frozen=True)
class RDPoint:
    """One operating point: where a (model, lambda) pair lands on the curve."""

    model: str
    lam: float
    bpp: float
    psnr_db: float


@dataclass(frozen=True)
class HfMap:
    """High-frequency residual map plus the tap it was captured from."""

    data: np.ndarray
    source: str


def psnr(x, x_hat) -> float:
    """Peak signal-to-noise ratio in dB on [0, 255] images, capped at 100."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    for arr in (a, b):
        if arr.size == 0 or arr.min() < 0.0 or arr.max() > 255.0:
            raise DomainError("images must be non-empty with values in [0, 255]")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(255.0 ** 2 / mse))


def bpp(file_bytes: int, width: int, height: int) -> float:
    """Bits per pixel of a physical payload."""
    if width < 1 or height < 1:
        raise DomainError(f"image must have pixels, got {width}x{height}")
    if file_bytes < 0:
        raise DomainError("negative file size")
    return file_bytes * 8.0 / (width * height)


def high_freq_map(x, source: str = "") -> HfMap:
    """Mean-removed detail of a feature tensor: (1/C) sum_c (x_c - x_c * k3x3).

    The subtraction is arranged as an average of center-minus-shift
    differences so constants cancel exactly, not just to rounding.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim != 4:
        raise ShapeError(f"expected a (N, C, H, W) feature tensor, got {data.shape}")
    n, c, h, w = data.shape
    acc = np.zeros((h, w))
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    for img in range(n):
        for ch in range(c):
            plane = data[img, ch]
            for dy in range(3):
                for dx in range(3):
                    acc += plane - padded[img, ch, dy:dy + h, dx:dx + w]
    return HfMap(acc / (9.0 * n * c), source)


def capture_scaling_features(model: CompressionModel, image: np.ndarray,
                             layer_selector: str) -> Tensor:
    """The feature entering the named layer's scaling branch.

    Runs the full padded analysis -> round -> synthesis pipeline with taps
    enabled; capturing is read-only, so the forward result is bit-identical
    to an untapped run.
    """
    valid = model.tap_names()
    if layer_selector not in valid:
        raise DomainError(f"unknown tap {layer_selector!r}; valid taps: "
                          f"{', '.join(valid)}")
    taps: dict[str, Tensor] = {}
    x = to_float(image)
    padded, _, _ = replicate_pad(x, model.config.downsample_factor)
    y_hat = quantize_round(model.analysis(padded, taps=taps))
    model.synthesis(y_hat, taps=taps, clamp=True)
    return taps[layer_selector]


def log_gradient_map(image: np.ndarray) -> HfMap:
    """log(1 + |gradient|) of the luminance, central differences."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3), got {img.shape}")
    gray = img.mean(axis=2)
    padded = np.pad(gray, 1, mode="edge")
    h, w = gray.shape
    gx = (padded[1:h + 1, 2:] - padded[1:h + 1, :w]) / 2.0
    gy = (padded[2:, 1:w + 1] - padded[:h, 1:w + 1]) / 2.0
    return HfMap(np.log1p(np.hypot(gx, gy)), "image-gradient")


def flat_region_stat(hf: HfMap, rect: tuple[int, int, int, int]) -> float:
    """Mean |value| over (top, left, height, width) -- the textured-vs-flat
    energy probe."""
    top, left, height, width = rect
    map_h, map_w = hf.data.shape
    if (height < 1 or width < 1 or top < 0 or left < 0
            or top + height > map_h or left + width > map_w):
        raise DomainError(f"rectangle {rect} does not fit a {map_h}x{map_w} map")
    return float(np.abs(hf.data[top:top + height, left:left + width]).mean())


def write_pgm(path: str, hf: HfMap) -> None:
    """8-bit P5 with per-image min-max normalization; a `.meta` sidecar
    records the normalization so absolute scales stay recoverable.
    A constant map renders as mid-gray (128)."""
    data = hf.data
    h, w = data.shape
    lo, hi = float(data.min()), float(data.max())
    if hi > lo:
        scaled = np.floor((data - lo) / (hi - lo) * 255.0 + 0.5)
    else:
        scaled = np.full((h, w), 128.0)
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii")
                       + scaled.astype(np.uint8).tobytes())
    meta = (f"source: {hf.source}\nmin: {lo!r}\nmax: {hi!r}\n"
            f"height: {h}\nwidth: {w}\n")
    atomic_write_text(str(path) + ".meta", meta)


def write_rd_csv(path: str, points) -> None:
    """One row per point, stable float formatting (repr round-trips)."""
    lines = ["model,lambda,bpp,psnr_db"]
    for p in points:
        lines.append(f"{p.model},{float(p.lam)!r},{float(p.bpp)!r},"
                     f"{float(p.psnr_db)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def mean_rd_point(points) -> RDPoint:
    """Arithmetic mean row for a set of same-model operating points."""
    points = list(points)
    if not points:
        raise DomainError("cannot average zero points")
    return RDPoint(model="mean",
                   lam=float(np.mean([p.lam for p in points])),
                   bpp=float(np.mean([p.bpp for p in points])),
                   psnr_db=float(np.mean([p.psnr_db for p in points])))

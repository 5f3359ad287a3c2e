"""Images, depth maps and masks, plus the pointwise operations applied to them.

All arrays are numpy, channels-last (H, W, C) for images and (H, W) for
depth maps and masks.  The batched torch counterparts used during training
live in :mod:`maskprobe.optimize`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidStatisticsError, ParameterError

MIN_SIZE = 8
DEFAULT_EPS = 0.025
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@dataclass(frozen=True)
class Image:
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionError(f"image must be HxWxC, got shape {data.shape}")
        h, w, c = data.shape
        if h < MIN_SIZE or w < MIN_SIZE:
            raise DimensionError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
        if c not in (1, 3):
            raise DimensionError(f"image must have 1 or 3 channels, got {c}")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class DepthMap:
    """Per-pixel depth in scene units.

    ``ground_truth`` maps must be strictly positive; predicted maps only
    need to be finite.
    """

    data: np.ndarray
    ground_truth: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise DimensionError(f"depth map must be HxW, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("depth map contains non-finite values")
        if self.ground_truth and not np.all(data > 0):
            raise ParameterError("ground-truth depth must be strictly positive")
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class Mask:
    data: np.ndarray
    binary: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[:, :, 0]
        if data.ndim != 2:
            raise DimensionError(f"mask must be HxW, got shape {data.shape}")
        if np.any(data < 0) or np.any(data > 1) or np.any(np.isnan(data)):
            raise ParameterError("mask values must lie in [0, 1]")
        if self.binary and not np.all((data == 0) | (data == 1)):
            raise ParameterError("binary mask must contain only 0 and 1")
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> tuple[int, int]:
        return self.data.shape

    @classmethod
    def ones(cls, height: int, width: int) -> "Mask":
        return cls(np.ones((height, width)), binary=True)

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        return cls(np.zeros((height, width)), binary=True)


@dataclass(frozen=True)
class SparsenessReport:
    fraction_nonzero: float
    n: int
    nonzero: int = field(default=0)

    def __float__(self):
        return self.fraction_nonzero


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics of a dataset."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise InvalidStatisticsError("mean and std must have the same length")
        std = np.asarray(self.std, dtype=np.float64)
        if np.any(~np.isfinite(std)) or np.any(std <= 0):
            raise InvalidStatisticsError(f"std components must be > 0, got {self.std}")

    @classmethod
    def from_images(cls, images) -> "NormStats":
        stack = np.stack([np.asarray(getattr(im, "data", im), dtype=np.float64) for im in images])
        flat = stack.reshape(-1, stack.shape[-1])
        return cls(tuple(float(v) for v in flat.mean(axis=0)), tuple(float(v) for v in flat.std(axis=0)))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def zscore(raw: np.ndarray, mean, std) -> np.ndarray:
    """(raw - mean) / std along the trailing channel axis."""
    std = np.asarray(std, dtype=np.float64)
    if np.any(~np.isfinite(std)) or np.any(std <= 0):
        raise InvalidStatisticsError(f"std components must be > 0, got {std.tolist()}")
    mean = np.asarray(mean, dtype=np.float64)
    raw = np.asarray(raw)
    if mean.shape[-1] != raw.shape[-1] or std.shape[-1] != raw.shape[-1]:
        raise DimensionError(f"statistics for {mean.shape[-1]} channels, image has {raw.shape[-1]}")
    out = (raw.astype(np.float64) - mean) / std
    return out.astype(raw.dtype if np.issubdtype(raw.dtype, np.floating) else np.float64)


def normalize_zscore(raw: Image, stats: NormStats) -> Image:
    return Image(zscore(raw.data, stats.mean, stats.std), normalized=True)


def denormalize(image: Image, stats: NormStats) -> Image:
    data = image.data.astype(np.float64) * np.asarray(stats.std) + np.asarray(stats.mean)
    return Image(data.astype(image.data.dtype), normalized=False)


def apply_mask(image: Image, mask: Mask) -> Image:
    """Pointwise product; one mask value is shared by all channels of a pixel."""
    if image.size != mask.size:
        raise DimensionError(f"image is {image.size}, mask is {mask.size}")
    m = mask.data.astype(image.data.dtype, copy=False)
    return Image(image.data * m[:, :, None], normalized=image.normalized)


def binarize(mask: Mask, eps: float = DEFAULT_EPS) -> Mask:
    if not 0.0 <= eps <= 1.0:
        raise ParameterError(f"eps must lie in [0, 1], got {eps}")
    dtype = mask.data.dtype if mask.data.dtype.kind == "f" else np.float64
    return Mask((mask.data >= eps).astype(dtype), binary=True)


def sparseness(mask: Mask) -> SparsenessReport:
    n = int(mask.data.size)
    nonzero = int(np.count_nonzero(mask.data > 0))
    return SparsenessReport(fraction_nonzero=nonzero / n, n=n, nonzero=nonzero)


def luminance(image: Image) -> np.ndarray:
    data = image.data.astype(np.float64)
    if image.channels == 1:
        return data[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * data[:, :, 0] + g * data[:, :, 1] + b * data[:, :, 2]


def correlate3x3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with replicate padding, output same size as input."""
    padded = np.pad(plane, 1, mode="edge")
    h, w = plane.shape
    out = np.zeros((h, w), dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            k = kernel[di, dj]
            if k:
                out += k * padded[di:di + h, dj:dj + w]
    return out


def sobel_magnitude(plane: np.ndarray) -> np.ndarray:
    # written as differences of opposite taps so flat regions give exactly 0
    p = np.pad(np.asarray(plane, dtype=np.float64), 1, mode="edge")
    h, w = plane.shape
    right, left = p[:, 2:w + 2], p[:, 0:w]
    gx = (right[0:h] - left[0:h]) + 2 * (right[1:h + 1] - left[1:h + 1]) + (right[2:h + 2] - left[2:h + 2])
    down, up = p[2:h + 2, :], p[0:h, :]
    gy = (down[:, 0:w] - up[:, 0:w]) + 2 * (down[:, 1:w + 1] - up[:, 1:w + 1]) + (down[:, 2:w + 2] - up[:, 2:w + 2])
    return np.hypot(gx, gy)


def edge_map(image: Image) -> Mask:
    """Sobel gradient magnitude of the luminance, rescaled to [0, 1] by its maximum.

    A constant image yields an all-zero map.
    """
    mag = sobel_magnitude(luminance(image))
    peak = mag.max()
    if peak <= 0:
        return Mask(np.zeros_like(mag))
    return Mask(np.clip(mag / peak, 0.0, 1.0))


def total_variation(mask: Mask) -> float:
    """Mean absolute difference between 4-neighbours (anisotropic TV per pixel)."""
    m = mask.data.astype(np.float64)
    return float((np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum()) / m.size)

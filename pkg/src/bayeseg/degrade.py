"""Image corruption battery: Gaussian blur, Rayleigh noise, brightness/contrast.

All functions take and return grayscale images as float arrays in [0, 1].
The noise model is additive Rayleigh: Z = sqrt(X^2 + Y^2) with X, Y
independent zero-mean Gaussians of standard deviation sigma, which is the
magnitude-image noise floor in signal-free regions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream

KINDS = ("none", "blur", "rician", "brightness_contrast")


@dataclass(frozen=True)
class DegradationSpec:
    """One parameterized corruption; kind 'none' is the clean baseline."""
    kind: str
    blur_sigma: Optional[float] = None
    noise_sigma: Optional[float] = None
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    seed: int = 0
    spec_id: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind: {self.kind!r}")
        if self.kind == "blur":
            if self.blur_sigma is None or self.blur_sigma <= 0:
                raise ValueError(f"blur needs blur_sigma > 0, got {self.blur_sigma}")
        if self.kind == "rician":
            if self.noise_sigma is None or self.noise_sigma <= 0:
                raise ValueError(f"rician needs noise_sigma > 0, got {self.noise_sigma}")
        if self.kind == "brightness_contrast" and self.contrast_gain <= 0:
            raise ValueError(f"contrast_gain must be > 0, got {self.contrast_gain}")

    @property
    def id(self) -> str:
        if self.spec_id:
            return self.spec_id
        if self.kind == "blur":
            return f"blur_{self.blur_sigma:g}"
        if self.kind == "rician":
            return f"rician_{self.noise_sigma:g}"
        if self.kind == "brightness_contrast":
            return f"bc_{self.brightness_delta:g}_{self.contrast_gain:g}"
        return "clean"

    @property
    def param(self) -> str:
        if self.kind == "blur":
            return f"{self.blur_sigma:g}"
        if self.kind == "rician":
            return f"{self.noise_sigma:g}"
        if self.kind == "brightness_contrast":
            return f"{self.brightness_delta:g}/{self.contrast_gain:g}"
        return ""

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Truncated 2D Gaussian on an integer grid of radius ceil(3*sigma), sum 1."""
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    coords = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    kernel = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    return kernel / kernel.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Convolve with the normalized Gaussian kernel, reflect padding at borders."""
    kernel = gaussian_kernel(sigma)
    radius = kernel.shape[0] // 2
    img = np.asarray(image, dtype=np.float64)
    padded = np.pad(img, radius, mode="reflect")
    windows = sliding_window_view(padded, kernel.shape)
    return np.einsum("hwij,ij->hw", windows, kernel)


def rayleigh_sample(sigma: float, n: int, rng: RngStream) -> np.ndarray:
    """Magnitudes of 2D Gaussian vectors: sqrt(X^2 + Y^2), X,Y ~ N(0, sigma^2)."""
    if sigma <= 0:
        raise ValueError(f"noise sigma must be positive, got {sigma}")
    x = rng.normal((n,), dtype=np.float64) * sigma
    y = rng.normal((n,), dtype=np.float64) * sigma
    return np.sqrt(x * x + y * y)


def rician_noise_apply(image: np.ndarray, sigma: float, rng: RngStream) -> np.ndarray:
    """Add independent Rayleigh noise per pixel, clamp back to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    noise = rayleigh_sample(sigma, img.size, rng).reshape(img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def brightness_contrast(image: np.ndarray, delta: float, gain: float) -> np.ndarray:
    """Affine remap around mid-gray: clamp(gain*(I - 0.5) + 0.5 + delta)."""
    if gain <= 0:
        raise ValueError(f"contrast gain must be positive, got {gain}")
    img = np.asarray(image, dtype=np.float64)
    return np.clip(gain * (img - 0.5) + 0.5 + delta, 0.0, 1.0)


def apply_degradation(image: np.ndarray, spec: DegradationSpec,
                      rng: RngStream = None) -> np.ndarray:
    """Apply one spec to a [0,1] image; noise draws come from `rng` or the spec seed."""
    if spec.kind == "none":
        return np.asarray(image, dtype=np.float64).copy()
    if spec.kind == "blur":
        return np.clip(gaussian_blur(image, spec.blur_sigma), 0.0, 1.0)
    if spec.kind == "rician":
        rng = rng if rng is not None else RngStream(spec.seed)
        return rician_noise_apply(image, spec.noise_sigma, rng)
    return brightness_contrast(image, spec.brightness_delta, spec.contrast_gain)

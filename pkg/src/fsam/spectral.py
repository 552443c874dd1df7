"""Spatial <-> frequency domain conversions for the frequency pathway.

Images are H x W x C float arrays with values in [0, 1] (C in {1, 3});
spectra are complex H x W x C arrays. The forward transform is
unnormalized; the inverse carries the 1/(HW) factor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Brute-force transform is quadratic in pixel count; keep it for small grids.
DFT_BRUTE_MAX_PIXELS = 64 * 64


class SpectralError(ValueError):
    pass


class NonFiniteInputError(SpectralError):
    pass


class DimensionTooLargeError(SpectralError):
    pass


def _as_hwc(arr: np.ndarray) -> np.ndarray:
    """Accept H x W or H x W x C and return an H x W x C view."""
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise SpectralError(f"expected 2-D or 3-D array, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise SpectralError(f"spatial size must be at least 2x2, got {arr.shape[:2]}")
    return arr


def _check_finite(arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInputError("input contains non-finite values")


def dft_brute(image: np.ndarray) -> np.ndarray:
    """Direct double-sum 2-D DFT, per channel. Oracle for small instances.

    coeffs[u, v] = sum_h sum_w f(h, w) * exp(-2j*pi*(u*h/H + v*w/W))
    """
    image = _as_hwc(image)
    _check_finite(image)
    h, w, c = image.shape
    if h * w > DFT_BRUTE_MAX_PIXELS:
        raise DimensionTooLargeError(
            f"{h}x{w} exceeds the brute-force cap of {DFT_BRUTE_MAX_PIXELS} pixels"
        )
    eh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    ew = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = np.empty((h, w, c), dtype=np.complex128)
    for ch in range(c):
        out[:, :, ch] = eh @ image[:, :, ch].astype(np.float64) @ ew
    return out


def fft2(image: np.ndarray) -> np.ndarray:
    """Fast 2-D transform, per channel; equals dft_brute up to float error."""
    image = _as_hwc(image)
    _check_finite(image)
    return np.fft.fft2(image.astype(np.float64), axes=(0, 1))


def ifft2(spec: np.ndarray) -> np.ndarray:
    """Inverse transform; returns the real part (valid for real-image spectra)."""
    spec = _as_hwc(spec)
    _check_finite(spec)
    return np.fft.ifft2(spec, axes=(0, 1)).real


def amplitude(spec: np.ndarray) -> np.ndarray:
    spec = _as_hwc(spec)
    return np.abs(spec)


def phase(spec: np.ndarray) -> np.ndarray:
    """Per-entry argument in (-pi, pi]; the phase of 0 is defined as 0."""
    spec = _as_hwc(spec)
    values = np.angle(spec)
    values = np.where(spec == 0, 0.0, values)
    # np.angle can return -pi for entries on the negative real axis
    values = np.where(values <= -np.pi, np.pi, values)
    return values


@dataclass
class FrequencyInput:
    """Normalized amplitude grid fed to the frequency patch embedding."""

    values: np.ndarray  # H x W x C in [0, 1]
    log_min: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log_max: np.ndarray = field(default_factory=lambda: np.zeros(0))
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def amplitude_preprocess(amp: np.ndarray) -> FrequencyInput:
    """log1p -> center the DC bin -> per-channel min-max to [0, 1].

    Channels whose post-log range collapses are zeroed and flagged instead
    of dividing by zero.
    """
    amp = _as_hwc(amp)
    _check_finite(amp)
    logged = np.fft.fftshift(np.log1p(amp), axes=(0, 1))
    c = logged.shape[2]
    lo = logged.reshape(-1, c).min(axis=0)
    hi = logged.reshape(-1, c).max(axis=0)
    degenerate = hi == lo
    span = np.where(degenerate, 1.0, hi - lo)
    values = (logged - lo) / span
    values[:, :, degenerate] = 0.0
    return FrequencyInput(values=values, log_min=lo, log_max=hi, degenerate=degenerate)

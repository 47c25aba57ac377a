"""Multicoil Fourier measurement operators.

The forward model maps a complex image x to per-coil k-space: each coil
sees S_i * x, a centred orthonormal 2-D Fourier transform is applied, and a
column mask keeps only the sampled phase-encode lines.  All functions here
are plain numpy; the fitting code differentiates through them analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Mask",
    "SensitivityMaps",
    "CoilMeasurement",
    "fft2c",
    "apply_mask",
    "forward_multicoil",
    "rss",
    "zero_filled",
    "data_consistency",
    "complex_to_channels",
    "channels_to_complex",
]


def fft2c(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Centred orthonormal 2-D FFT over the last two axes.

    Centred means the zero-frequency sample sits at index
    (H // 2, W // 2): an impulse there transforms to a constant.
    """
    shifted = sfft.ifftshift(x, axes=(-2, -1))
    if inverse:
        k = sfft.ifft2(shifted, norm="ortho", axes=(-2, -1))
    else:
        k = sfft.fft2(shifted, norm="ortho", axes=(-2, -1))
    return sfft.fftshift(k, axes=(-2, -1))


@dataclass(frozen=True)
class Mask:
    """Column sampling pattern for a fixed k-space width.

    ``center_start``/``center_stop`` delimit (half-open) the fully sampled
    low-frequency band, which must be part of ``sampled_columns``.
    """

    width: int
    sampled_columns: tuple[int, ...]
    center_start: int
    center_stop: int

    def __post_init__(self):
        cols = tuple(sorted(set(int(c) for c in self.sampled_columns)))
        object.__setattr__(self, "sampled_columns", cols)
        if len(cols) == 0:
            raise ValueError("mask has no sampled columns")
        if cols[0] < 0 or cols[-1] >= self.width:
            raise ValueError(f"sampled columns outside [0, {self.width})")
        if not (0 <= self.center_start <= self.center_stop <= self.width):
            raise ValueError("invalid center band limits")
        band = set(range(self.center_start, self.center_stop))
        if not band.issubset(cols):
            raise ValueError("center band must be fully sampled")

    @property
    def n_sampled(self) -> int:
        return len(self.sampled_columns)

    @property
    def acceleration(self) -> float:
        return self.width / self.n_sampled

    def center_columns(self) -> tuple[int, ...]:
        return tuple(range(self.center_start, self.center_stop))

    def column_flags(self) -> np.ndarray:
        flags = np.zeros(self.width, dtype=bool)
        flags[list(self.sampled_columns)] = True
        return flags

    def center_flags(self) -> np.ndarray:
        flags = np.zeros(self.width, dtype=bool)
        flags[self.center_start : self.center_stop] = True
        return flags

    def without_columns(self, columns) -> "Mask":
        """New mask with the given sampled columns removed."""
        drop = set(int(c) for c in columns)
        missing = drop - set(self.sampled_columns)
        if missing:
            raise ValueError(f"columns not sampled: {sorted(missing)}")
        band = set(range(self.center_start, self.center_stop))
        if drop & band:
            raise ValueError("cannot remove center-band columns")
        kept = tuple(c for c in self.sampled_columns if c not in drop)
        return Mask(self.width, kept, self.center_start, self.center_stop)


@dataclass(frozen=True)
class SensitivityMaps:
    """Per-coil complex sensitivity profiles with an object support mask.

    On the support the profiles satisfy sum_i |S_i|^2 = 1; outside they are
    exactly zero.
    """

    maps: np.ndarray
    support: np.ndarray
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.maps.ndim != 3:
            raise ValueError(f"maps must be (n_coils, H, W), got shape {self.maps.shape}")
        if self.support.shape != self.maps.shape[1:]:
            raise ValueError("support shape must match the map grid")
        if self.support.dtype != bool:
            object.__setattr__(self, "support", self.support.astype(bool))
        if self.validate:
            power = np.sum(np.abs(self.maps) ** 2, axis=0)
            on = power[self.support]
            if on.size and np.max(np.abs(on - 1.0)) > 1e-6:
                raise ValueError("sensitivity maps are not normalised on the support")
            off = power[~self.support]
            if off.size and np.max(off) > 0:
                raise ValueError("sensitivity maps must vanish outside the support")

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.maps.shape[1:]


@dataclass(frozen=True)
class CoilMeasurement:
    """Masked multicoil k-space; unsampled columns are identically zero."""

    data: np.ndarray
    mask: Mask

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"measurement must be (n_coils, H, W), got shape {self.data.shape}")
        if self.data.shape[2] != self.mask.width:
            raise ValueError(
                f"k-space width {self.data.shape[2]} does not match mask width {self.mask.width}"
            )
        unsampled = ~self.mask.column_flags()
        if np.any(self.data[:, :, unsampled] != 0):
            raise ValueError("measurement has nonzero entries at unsampled columns")

    @property
    def n_coils(self) -> int:
        return self.data.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


def apply_mask(kspace: np.ndarray, mask: Mask) -> np.ndarray:
    """Zero every column that the mask does not sample."""
    if kspace.shape[-1] != mask.width:
        raise ValueError(f"k-space width {kspace.shape[-1]} does not match mask width {mask.width}")
    out = np.zeros_like(kspace)
    cols = list(mask.sampled_columns)
    out[..., cols] = kspace[..., cols]
    return out


def forward_multicoil(x: np.ndarray, maps: SensitivityMaps, mask: Mask) -> CoilMeasurement:
    """Simulate masked k-space of a complex image through every coil."""
    if x.shape != maps.grid_shape:
        raise ValueError(f"image shape {x.shape} does not match maps grid {maps.grid_shape}")
    coil_images = maps.maps * x[None, :, :]
    return CoilMeasurement(apply_mask(fft2c(coil_images), mask), mask)


def rss(coil_images: np.ndarray) -> np.ndarray:
    """Root-sum-of-squares combination of per-coil complex images."""
    if coil_images.ndim != 3:
        raise ValueError(f"expected (n_coils, H, W), got shape {coil_images.shape}")
    return np.sqrt(np.sum(np.abs(coil_images) ** 2, axis=0))


def zero_filled(y: CoilMeasurement) -> np.ndarray:
    """Baseline reconstruction: inverse transform of the masked data, then RSS."""
    return rss(fft2c(y.data, inverse=True))


def data_consistency(coil_images: np.ndarray, y: CoilMeasurement) -> np.ndarray:
    """Replace the sampled k-space columns of an estimate with the measured ones."""
    if coil_images.shape != y.data.shape:
        raise ValueError(f"estimate shape {coil_images.shape} does not match measurement {y.data.shape}")
    k = fft2c(coil_images)
    cols = list(y.mask.sampled_columns)
    k[..., cols] = y.data[..., cols]
    return fft2c(k, inverse=True)


def complex_to_channels(x: np.ndarray) -> np.ndarray:
    """(n, H, W) complex -> (2n, H, W) real with (re, im) pairs per coil.

    A bare (H, W) input is treated as a single coil.
    """
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected (n, H, W) complex, got shape {x.shape}")
    n, h, w = x.shape
    out = np.empty((2 * n, h, w), dtype=x.real.dtype)
    out[0::2] = x.real
    out[1::2] = x.imag
    return out


def channels_to_complex(c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`complex_to_channels`: (2n, H, W) real -> (n, H, W) complex."""
    if c.ndim != 3 or c.shape[0] % 2 != 0:
        raise ValueError(f"expected (2n, H, W) real, got shape {c.shape}")
    ctype = np.complex64 if c.dtype == np.float32 else np.complex128
    return (c[0::2] + 1j * c[1::2]).astype(ctype)

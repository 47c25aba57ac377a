"""Synthetic multicoil phantoms, sampling masks and array file IO.

Phantoms are elliptical piecewise-smooth complex images with optional
band-limited texture and a smooth random phase.  Coil sensitivities are
Gaussian profiles centred on a ring outside the object.  Everything is
deterministic given the spec seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .mri import CoilMeasurement, Mask, SensitivityMaps, forward_multicoil

__all__ = [
    "PhantomSpec",
    "MaskSpec",
    "make_phantom",
    "make_sens_maps",
    "make_mask",
    "simulate",
    "write_array",
    "read_array",
    "mask_to_array",
    "mask_from_array",
    "maps_from_array",
]

ARRAY_MAGIC = b"UMRI\x00"
ARRAY_VERSION = 1
_DTYPE_REAL32 = 0
_DTYPE_COMPLEX64 = 1
MAX_RANK = 4


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 128
    width: int = 96
    n_coils: int = 15
    n_ellipses: int = 6
    texture_amplitude: float = 0.04
    texture_scale: float = 2.0
    phase_scale: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom grid must be at least 8x8")
        if self.n_coils < 1:
            raise ValueError("need at least one coil")
        if self.n_ellipses < 0 or self.texture_amplitude < 0:
            raise ValueError("ellipse count and texture amplitude must be nonnegative")


@dataclass(frozen=True)
class MaskSpec:
    width: int
    acceleration: int = 4
    center_fraction: float | None = None
    kind: str = "random"
    seed: int = 0

    def __post_init__(self):
        if self.acceleration < 1:
            raise ValueError("acceleration must be at least 1")
        if self.kind not in ("random", "equispaced"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.center_fraction is not None and not (0 < self.center_fraction < 1):
            raise ValueError("center_fraction must lie in (0, 1)")

    def resolved_center_fraction(self) -> float:
        """Default low-frequency budget: 8% of columns at 4x, 4% at 8x."""
        if self.center_fraction is not None:
            return self.center_fraction
        return 0.08 if self.acceleration <= 4 else 0.04


def _smoothstep(q: np.ndarray, edge: float) -> np.ndarray:
    """1 well inside the ellipse (q < 1 - edge), 0 outside (q > 1)."""
    s = np.clip((1.0 - q) / edge, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _ellipse_q(yy, xx, cy, cx, a, b, angle):
    dy = yy - cy
    dx = xx - cx
    cos_t, sin_t = np.cos(angle), np.sin(angle)
    u = dy * cos_t + dx * sin_t
    v = -dy * sin_t + dx * cos_t
    return (u / a) ** 2 + (v / b) ** 2


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Build the complex phantom image and its boolean support mask."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    a_main = h * (0.40 + 0.03 * rng.uniform())
    b_main = w * (0.40 + 0.03 * rng.uniform())
    q_main = _ellipse_q(yy, xx, cy, cx, a_main, b_main, 0.0)
    support = q_main <= 1.0
    edge = 3.0 / min(a_main, b_main)
    mag = 0.7 * _smoothstep(q_main, edge)

    for _ in range(spec.n_ellipses):
        ecy = cy + rng.uniform(-0.45, 0.45) * a_main
        ecx = cx + rng.uniform(-0.45, 0.45) * b_main
        ea = a_main * rng.uniform(0.08, 0.30)
        eb = b_main * rng.uniform(0.08, 0.30)
        angle = rng.uniform(0.0, np.pi)
        delta = rng.uniform(0.15, 0.45) * (1 if rng.uniform() < 0.55 else -1)
        q = _ellipse_q(yy, xx, ecy, ecx, ea, eb, angle)
        mag += delta * _smoothstep(q, 3.0 / min(ea, eb)) * support

    if spec.texture_amplitude > 0:
        noise = gaussian_filter(rng.standard_normal((h, w)), spec.texture_scale)
        noise = (noise - noise.mean()) / noise.std()
        mag += spec.texture_amplitude * noise * _smoothstep(q_main, edge)

    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak <= 0:
        raise RuntimeError("degenerate phantom: empty magnitude")
    mag /= peak

    phase = gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 8.0)
    phase = (phase - phase.mean()) / phase.std() * (spec.phase_scale * np.pi)
    image = (mag * np.exp(1j * phase)).astype(np.complex64)
    return image, support


def make_sens_maps(n_coils: int, height: int, width: int, support: np.ndarray) -> SensitivityMaps:
    """Gaussian coil profiles centred on a ring outside the support.

    Deterministic: coil i sits at angle 2*pi*i/n plus a fixed offset, with a
    smooth linear phase ramp pointing at its centre.  Profiles are
    normalised so that sum_i |S_i|^2 = 1 on the support and 0 outside.
    """
    if support.shape != (height, width):
        raise ValueError("support shape must match the requested grid")
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    sigma = 0.5 * max(height, width)
    raw = np.empty((n_coils, height, width), dtype=np.complex128)
    for i in range(n_coils):
        theta = 2.0 * np.pi * i / n_coils + np.pi / (2.0 * n_coils)
        ring_y = cy + 0.62 * height * np.sin(theta)
        ring_x = cx + 0.62 * width * np.cos(theta)
        dist2 = (yy - ring_y) ** 2 + (xx - ring_x) ** 2
        magnitude = np.exp(-dist2 / (2.0 * sigma**2))
        phase = 0.8 * np.pi * ((xx - cx) / width * np.cos(theta) + (yy - cy) / height * np.sin(theta)) + theta
        raw[i] = magnitude * np.exp(1j * phase)
    power = np.sqrt(np.sum(np.abs(raw) ** 2, axis=0))
    maps = np.where(support[None], raw / power[None], 0).astype(np.complex64)
    return SensitivityMaps(maps, support.astype(bool))


def make_mask(spec: MaskSpec) -> Mask:
    """Column mask with a fully sampled centre band.

    The total sampled-column budget is round(width / acceleration); the
    centre band takes round(center_fraction * width) of it and the rest is
    spread over the remaining columns either at random or equispaced.
    """
    width = spec.width
    total = round(width / spec.acceleration)
    n_center = round(spec.resolved_center_fraction() * width)
    if n_center < 1:
        raise ValueError("center band is empty; increase center_fraction")
    if total < n_center:
        raise ValueError(
            f"column budget {total} cannot cover the {n_center}-column center band"
        )
    start = (width - n_center) // 2
    center = list(range(start, start + n_center))
    rest = [c for c in range(width) if c not in center]
    n_extra = total - n_center
    if spec.kind == "random":
        rng = np.random.default_rng(spec.seed)
        extra = [int(c) for c in rng.choice(rest, size=n_extra, replace=False)]
    else:
        # evenly spaced positions among the non-center candidates; adjacent
        # picks differ by floor or ceil of the ideal gap
        extra = [rest[int((j + 0.5) * len(rest) / n_extra)] for j in range(n_extra)] if n_extra else []
    return Mask(width, tuple(sorted(center + extra)), start, start + n_center)


def simulate(
    x: np.ndarray,
    maps: SensitivityMaps,
    mask: Mask,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> CoilMeasurement:
    """Measure a complex image; optionally add complex Gaussian noise.

    The per-component noise std is noise_sigma * ||y||_2 / sqrt(count),
    where count is the number of sampled complex entries, and noise is only
    added where the mask samples.
    """
    y = forward_multicoil(x, maps, mask)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        cols = list(mask.sampled_columns)
        data = y.data.copy()
        sampled = data[..., cols]
        count = sampled.size
        std = noise_sigma * np.linalg.norm(sampled) / np.sqrt(count)
        noise = std * (
            rng.standard_normal(sampled.shape) + 1j * rng.standard_normal(sampled.shape)
        )
        data[..., cols] = sampled + noise.astype(sampled.dtype)
        return CoilMeasurement(data, mask)
    return y


# ---------------------------------------------------------------------------
# array file format


def write_array(path, arr: np.ndarray) -> None:
    """Write a real or complex array; reals are stored as float32, complex as
    interleaved float32 pairs, both little-endian row-major."""
    arr = np.asarray(arr)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"rank {arr.ndim} exceeds the format limit of {MAX_RANK}")
    if arr.dtype.kind == "f":
        code, out = _DTYPE_REAL32, np.ascontiguousarray(arr, dtype="<f4")
    elif arr.dtype.kind == "c":
        code, out = _DTYPE_COMPLEX64, np.ascontiguousarray(arr, dtype="<c8")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC)
        fh.write(struct.pack("<H", ARRAY_VERSION))
        fh.write(struct.pack("<BB", code, arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(out.tobytes())


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: truncated array file")
    return buf


def read_array(path) -> np.ndarray:
    """Read an array written by :func:`write_array`."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(ARRAY_MAGIC), path) != ARRAY_MAGIC:
            raise ValueError(f"{path}: not an array file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, path))
        if version != ARRAY_VERSION:
            raise ValueError(f"{path}: unsupported array file version {version}")
        code, rank = struct.unpack("<BB", _read_exact(fh, 2, path))
        if code not in (_DTYPE_REAL32, _DTYPE_COMPLEX64):
            raise ValueError(f"{path}: unknown dtype code {code}")
        if rank > MAX_RANK:
            raise ValueError(f"{path}: rank {rank} exceeds the format limit of {MAX_RANK}")
        shape = tuple(struct.unpack("<I", _read_exact(fh, 4, path))[0] for _ in range(rank))
        count = 1
        for extent in shape:
            if extent == 0:
                raise ValueError(f"{path}: zero extent in shape {shape}")
            count *= extent
        if count > 2**31:
            raise ValueError(f"{path}: element count {count} overflows the format")
        itemsize = 4 if code == _DTYPE_REAL32 else 8
        payload = _read_exact(fh, itemsize * count, path)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    dtype = "<f4" if code == _DTYPE_REAL32 else "<c8"
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def mask_to_array(mask: Mask) -> np.ndarray:
    """Encode a mask as a (2, width) float array: sampled flags, centre flags."""
    return np.stack([mask.column_flags(), mask.center_flags()]).astype(np.float32)


def mask_from_array(arr: np.ndarray) -> Mask:
    if arr.ndim != 2 or arr.shape[0] != 2:
        raise ValueError(f"mask array must be (2, width), got shape {arr.shape}")
    sampled = np.flatnonzero(arr[0] != 0)
    center = np.flatnonzero(arr[1] != 0)
    if center.size == 0:
        raise ValueError("mask array has an empty center band")
    start, stop = int(center[0]), int(center[-1]) + 1
    if center.size != stop - start:
        raise ValueError("mask center band is not contiguous")
    return Mask(arr.shape[1], tuple(int(c) for c in sampled), start, stop)


def maps_from_array(arr: np.ndarray) -> SensitivityMaps:
    """Rebuild sensitivity maps from a stored complex array; the support is
    wherever the coil power is nonzero."""
    if arr.ndim != 3:
        raise ValueError(f"maps array must be (n_coils, H, W), got shape {arr.shape}")
    power = np.sum(np.abs(arr) ** 2, axis=0)
    return SensitivityMaps(arr, power > 0.5)

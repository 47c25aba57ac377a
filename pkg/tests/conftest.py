"""Shared builders for small synthetic measurement problems."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from umri.mri import Mask, SensitivityMaps, forward_multicoil


def smooth_image(h, w, seed, phase_scale=0.5):
    """Band-limited random complex image with magnitude in [0, 1]."""
    rng = np.random.default_rng(seed)
    mag = gaussian_filter(rng.standard_normal((h, w)), 3.0)
    mag = (mag - mag.min()) / (mag.max() - mag.min())
    ph = gaussian_filter(rng.standard_normal((h, w)), 6.0)
    ph = phase_scale * np.pi * (ph - ph.mean()) / ph.std()
    return (mag * np.exp(1j * ph)).astype(np.complex64)


def norm_maps(n_c, h, w, seed):
    """Random smooth sensitivity maps, normalised everywhere."""
    rng = np.random.default_rng(seed)
    raw = np.stack(
        [
            gaussian_filter(rng.standard_normal((h, w)), 8.0)
            + 1j * gaussian_filter(rng.standard_normal((h, w)), 8.0)
            for _ in range(n_c)
        ]
    )
    power = np.sqrt(np.sum(np.abs(raw) ** 2, axis=0))
    return SensitivityMaps((raw / power).astype(np.complex64), np.ones((h, w), dtype=bool))


def random_column_mask(width, accel, center_fraction, seed):
    rng = np.random.default_rng(seed)
    total = round(width / accel)
    n_center = round(center_fraction * width)
    start = (width - n_center) // 2
    center = list(range(start, start + n_center))
    rest = [c for c in range(width) if c not in center]
    extra = sorted(rng.choice(rest, total - n_center, replace=False))
    return Mask(width, tuple(center + [int(c) for c in extra]), start, start + n_center)


@pytest.fixture(scope="session")
def small_problem():
    """3-coil 32x24 measurement of a smooth image at roughly 4x acceleration."""
    h, w, n_c = 32, 24, 3
    x = smooth_image(h, w, seed=1)
    maps = norm_maps(n_c, h, w, seed=2)
    mask = random_column_mask(w, accel=4, center_fraction=0.12, seed=3)
    y = forward_multicoil(x, maps, mask)
    return {"x": x, "maps": maps, "mask": mask, "y": y}

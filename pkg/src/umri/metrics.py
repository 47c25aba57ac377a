"""Image quality metrics and evaluation reports.

All metrics operate on real magnitude images.  PSNR, SSIM and MS-SSIM take
an explicit data range; VIF is range-free.  ``evaluate`` applies one of
four normalisation conventions first:

``none``
    images compared as given
``minmax``
    both images independently rescaled to [0, 1]
``meanstd_both``
    both images standardised to zero mean, unit variance
``meanstd_gt`` (default)
    the reference is shifted and scaled to match the reconstruction's
    mean and variance; the reconstruction is left untouched
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "normalize",
    "psnr",
    "ssim",
    "ms_ssim",
    "vif",
    "evaluate",
    "MetricReport",
    "MetricSummary",
]

NORMALIZATIONS = ("none", "minmax", "meanstd_both", "meanstd_gt")
EVALUATION_MODES = ("image", "volume")
METRIC_NAMES = ("psnr", "ssim", "ms_ssim", "vif")

SSIM_WINDOW = 11
VIF_MIN_SIZE = 32
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
VIF_SIGMA_NSQ = 2.0


def normalize(gt: np.ndarray, recon: np.ndarray, mode: str = "meanstd_gt") -> tuple[np.ndarray, np.ndarray]:
    """Return (gt, recon) mapped into a common intensity convention."""
    if mode not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {mode!r}, expected one of {NORMALIZATIONS}")
    gt = np.asarray(gt, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if mode == "none":
        return gt.copy(), recon.copy()
    if mode == "minmax":
        return _minmax(gt), _minmax(recon)
    if mode == "meanstd_both":
        return _standardise(gt), _standardise(recon)
    matched = _standardise(gt) * recon.std() + recon.mean()
    return matched, recon.copy()


def _minmax(x):
    lo, hi = x.min(), x.max()
    if hi == lo:
        raise ValueError("cannot min-max normalize a constant image")
    return (x - lo) / (hi - lo)


def _standardise(x):
    sd = x.std()
    if sd == 0:
        raise ValueError("cannot standardise a constant image")
    return (x - x.mean()) / sd


def psnr(gt: np.ndarray, recon: np.ndarray, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    err = np.mean((np.asarray(gt, dtype=np.float64) - np.asarray(recon, dtype=np.float64)) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable correlation, cropped to the region unaffected by boundaries."""
    out = correlate1d(img, window, axis=0, mode="constant")
    out = correlate1d(out, window, axis=1, mode="constant")
    r = len(window) // 2
    return out[r:-r, r:-r] if r else out


def _ssim_maps(gt, recon, data_range, window, sigma):
    win = _gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu1 = _filter_valid(gt, win)
    mu2 = _filter_valid(recon, win)
    s11 = _filter_valid(gt * gt, win) - mu1 * mu1
    s22 = _filter_valid(recon * recon, win) - mu2 * mu2
    s12 = _filter_valid(gt * recon, win) - mu1 * mu2
    cs = (2.0 * s12 + c2) / (s11 + s22 + c2)
    luminance = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1)
    return luminance * cs, cs


def ssim(gt: np.ndarray, recon: np.ndarray, data_range: float) -> float:
    """Mean structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Local statistics are evaluated only where the window fits entirely
    inside the image, so both dimensions must be at least 11 pixels.
    """
    gt = np.asarray(gt, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {recon.shape}")
    if min(gt.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ssim")
    full, _ = _ssim_maps(gt, recon, data_range, SSIM_WINDOW, SSIM_SIGMA)
    return float(full.mean())


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(gt: np.ndarray, recon: np.ndarray, data_range: float) -> float:
    """Multi-scale SSIM with the standard five-scale weights.

    Scales whose downsampled images drop below the 11-pixel window are cut
    off and the remaining weights renormalised to sum to one.
    """
    gt = np.asarray(gt, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    if gt.shape != recon.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {recon.shape}")
    if min(gt.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for ms_ssim")

    cs_values = []
    last_ssim = None
    a, b = gt, recon
    for _ in MS_SSIM_WEIGHTS:
        if min(a.shape) < SSIM_WINDOW:
            break
        full, cs = _ssim_maps(a, b, data_range, SSIM_WINDOW, SSIM_SIGMA)
        cs_values.append(float(cs.mean()))
        last_ssim = float(full.mean())
        a, b = _downsample2(a), _downsample2(b)
    weights = np.array(MS_SSIM_WEIGHTS[: len(cs_values)])
    weights /= weights.sum()
    # the last used scale contributes the full ssim, earlier ones only cs
    terms = [max(v, 1e-6) for v in cs_values[:-1]] + [max(last_ssim, 1e-6)]
    return float(np.prod([t**w for t, w in zip(terms, weights)]))


def vif(gt: np.ndarray, recon: np.ndarray) -> float:
    """Pixel-domain visual information fidelity over four dyadic scales.

    Local statistics use Gaussian windows of size 2^(5-scale)+1 (sigma N/5)
    in valid mode; between scales the images are pre-filtered and
    subsampled by two.  Images should be at least 32x32; scales that no
    longer fit are skipped.
    """
    ref = np.asarray(gt, dtype=np.float64)
    dist = np.asarray(recon, dtype=np.float64)
    if ref.shape != dist.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {dist.shape}")
    if min(ref.shape) < VIF_MIN_SIZE:
        raise ValueError(f"images must be at least {VIF_MIN_SIZE}x{VIF_MIN_SIZE} for vif")
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        size = 2 ** (4 - scale + 1) + 1
        win = _gaussian_window(size, size / 5.0)
        if scale > 1:
            if min(ref.shape) < size:
                break
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        if min(ref.shape) < size:
            break
        mu1 = _filter_valid(ref, win)
        mu2 = _filter_valid(dist, win)
        sigma1_sq = np.clip(_filter_valid(ref * ref, win) - mu1 * mu1, 0.0, None)
        sigma2_sq = np.clip(_filter_valid(dist * dist, win) - mu2 * mu2, 0.0, None)
        sigma12 = _filter_valid(ref * dist, win) - mu1 * mu2

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12

        g = np.where(sigma1_sq < eps, 0.0, g)
        sv_sq = np.where(sigma1_sq < eps, sigma2_sq, sv_sq)
        sigma1_sq = np.where(sigma1_sq < eps, 0.0, sigma1_sq)
        sv_sq = np.where(sigma2_sq < eps, 0.0, sv_sq)
        g = np.where(sigma2_sq < eps, 0.0, g)
        sv_sq = np.where(g < 0, sigma2_sq, sv_sq)
        g = np.where(g < 0, 0.0, g)
        sv_sq = np.maximum(sv_sq, eps)

        num += float(np.sum(np.log10(1.0 + g * g * sigma1_sq / (sv_sq + VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + sigma1_sq / VIF_SIGMA_NSQ)))
    if den == 0:
        raise ValueError("vif reference has no local variance at any scale")
    return num / den


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricSummary:
    per_image: list[float]
    mean: float
    ci95: float


@dataclass
class MetricReport:
    metrics: dict[str, MetricSummary]
    normalization: str
    evaluation_mode: str

    def to_json_dict(self) -> dict:
        # strict JSON has no Infinity/NaN tokens, so encode those as strings
        def enc(v: float):
            return v if math.isfinite(v) else str(v)

        return {
            "normalization": self.normalization,
            "evaluation_mode": self.evaluation_mode,
            "metrics": {
                name: {
                    "per_image": [enc(v) for v in s.per_image],
                    "mean": enc(s.mean),
                    "ci95": enc(s.ci95),
                }
                for name, s in self.metrics.items()
            },
        }


def _summarise(values: list[float]) -> MetricSummary:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if len(values) > 1 and np.all(np.isfinite(arr)):
        ci = 1.96 * float(arr.std(ddof=1)) / math.sqrt(len(values))
    else:
        ci = 0.0
    return MetricSummary(per_image=[float(v) for v in values], mean=mean, ci95=ci)


def evaluate(
    recons: np.ndarray,
    gts: np.ndarray,
    normalization: str = "meanstd_gt",
    evaluation_mode: str = "image",
    metrics: tuple[str, ...] = METRIC_NAMES,
) -> MetricReport:
    """Score a stack of reconstructions against references.

    2-D inputs are treated as single-image stacks.  In ``image`` mode the
    data range for PSNR/SSIM comes from each normalised reference slice; in
    ``volume`` mode one range is shared by the whole stack.
    """
    if evaluation_mode not in EVALUATION_MODES:
        raise ValueError(f"unknown evaluation mode {evaluation_mode!r}")
    unknown = set(metrics) - set(METRIC_NAMES)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    recons = np.asarray(recons, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if recons.ndim == 2:
        recons = recons[None]
        gts = gts[None]
    if recons.shape != gts.shape:
        raise ValueError(f"shape mismatch: {recons.shape} vs {gts.shape}")

    pairs = [normalize(g, r, normalization) for g, r in zip(gts, recons)]
    ranges = [float(g.max() - g.min()) for g, _ in pairs]
    if evaluation_mode == "volume":
        lo = min(float(g.min()) for g, _ in pairs)
        hi = max(float(g.max()) for g, _ in pairs)
        ranges = [hi - lo] * len(pairs)

    values: dict[str, list[float]] = {name: [] for name in metrics}
    for (g, r), rng in zip(pairs, ranges):
        for name in metrics:
            if name == "psnr":
                values[name].append(psnr(g, r, rng))
            elif name == "ssim":
                values[name].append(ssim(g, r, rng))
            elif name == "ms_ssim":
                values[name].append(ms_ssim(g, r, rng))
            else:
                values[name].append(vif(g, r))
    return MetricReport(
        metrics={name: _summarise(vals) for name, vals in values.items()},
        normalization=normalization,
        evaluation_mode=evaluation_mode,
    )

"""Hyper-parameter selection by hold-out k-space cross validation.

A fraction q of the measured k-space is removed, the decoder is fitted to
the rest, and configurations are ranked by how well the reconstruction
predicts the held-out measurements.  No ground truth is involved, so the
procedure works on a single undersampled measurement.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .decoders import DecoderConfig, param_count
from .fitting import FitConfig, reconstruct_full
from .mri import CoilMeasurement, SensitivityMaps, fft2c

__all__ = [
    "HOLDOUT_MODES",
    "HoldoutSplit",
    "HyperConfig",
    "FoldScores",
    "AutotuneResult",
    "default_grid",
    "holdout_split",
    "build_decoder_config",
    "score_config",
    "autotune",
]

HOLDOUT_MODES = ("columns", "samples")


@dataclass(frozen=True)
class HoldoutSplit:
    """One train/validation split of a single measurement."""

    fraction: float
    mode: str
    heldout_columns: tuple[int, ...]
    heldout_mask: np.ndarray
    y_minus: CoilMeasurement


@dataclass(frozen=True)
class HyperConfig:
    """One point of the search grid."""

    n_layers: int
    channels: int
    sens: bool

    def label(self) -> str:
        return f"layers={self.n_layers} channels={self.channels} sens={int(self.sens)}"


@dataclass(frozen=True)
class FoldScores:
    config: HyperConfig
    fold_errors: tuple[float, ...]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.fold_errors))


@dataclass(frozen=True)
class AutotuneResult:
    best: HyperConfig
    table: tuple[FoldScores, ...]

    def to_json_dict(self) -> dict:
        return {
            "chosen": vars(self.best) | {"sens": int(self.best.sens)},
            "table": [
                {
                    "config": vars(s.config) | {"sens": int(s.config.sens)},
                    "fold_errors": list(s.fold_errors),
                    "mean_error": s.mean_error,
                }
                for s in self.table
            ],
        }


def default_grid() -> tuple[HyperConfig, ...]:
    """The published search grid: layers x channels x sens flag."""
    return tuple(
        HyperConfig(n_layers=l, channels=c, sens=s)
        for l in (5, 8)
        for c in (64, 256)
        for s in (False, True)
    )


def holdout_split(
    y: CoilMeasurement,
    q: float,
    rng: np.random.Generator,
    mode: str = "columns",
) -> HoldoutSplit:
    """Remove a random fraction q of the measurements outside the center band.

    ``columns`` removes whole sampled columns (they leave the mask, so a fit
    treats them as never measured).  ``samples`` zeroes individual k-space
    entries in place, which keeps the mask and lets the zeros act as fake
    measurements; it exists for comparison with the column rule.
    """
    if not 0 < q < 1:
        raise ValueError("holdout fraction must be in (0, 1)")
    if mode not in HOLDOUT_MODES:
        raise ValueError(f"unknown holdout mode {mode!r}, expected one of {HOLDOUT_MODES}")
    center = set(y.mask.center_columns())
    candidates = [c for c in y.mask.sampled_columns if c not in center]
    if not candidates:
        raise ValueError("no sampled columns outside the center band")

    entries = np.zeros(y.data.shape, dtype=bool)
    if mode == "columns":
        n_out = round(q * len(candidates))
        if n_out == 0:
            raise ValueError(f"q={q} holds out zero of {len(candidates)} candidate columns")
        if n_out >= len(candidates):
            raise ValueError(f"q={q} would exhaust all {len(candidates)} candidate columns")
        held = tuple(sorted(int(c) for c in rng.choice(candidates, size=n_out, replace=False)))
        entries[..., held] = True
        data = y.data.copy()
        data[..., held] = 0
        y_minus = CoilMeasurement(data, y.mask.without_columns(held))
        return HoldoutSplit(q, mode, held, entries, y_minus)

    flat_candidates = np.zeros(y.data.shape, dtype=bool)
    flat_candidates[..., candidates] = True
    idx = np.flatnonzero(flat_candidates)
    n_out = round(q * idx.size)
    if n_out == 0:
        raise ValueError(f"q={q} holds out zero of {idx.size} candidate samples")
    if n_out >= idx.size:
        raise ValueError(f"q={q} would exhaust all {idx.size} candidate samples")
    chosen = rng.choice(idx, size=n_out, replace=False)
    entries.ravel()[chosen] = True
    data = y.data.copy()
    data.ravel()[chosen] = 0
    return HoldoutSplit(q, mode, (), entries, CoilMeasurement(data, y.mask))


def build_decoder_config(
    h: HyperConfig,
    y: CoilMeasurement,
    input_shape: tuple[int, int, int] = (256, 8, 6),
    arch: str = "convdecoder",
    seed: int = 0,
) -> DecoderConfig:
    """Expand a grid point into a full decoder configuration for ``y``."""
    out_channels = 2 if h.sens else 2 * y.n_coils
    return DecoderConfig(
        arch=arch,
        n_layers=h.n_layers,
        channels=h.channels,
        input_shape=input_shape,
        output_shape=y.data.shape[1:],
        out_channels=out_channels,
        seed=seed,
    )


Reconstructor = Callable[[CoilMeasurement, HyperConfig, int], np.ndarray]


def _fold_seeds(seed: int, k: int) -> list[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**32, size=k)]


def _holdout_mse(coil_images: np.ndarray, y: CoilMeasurement, split: HoldoutSplit) -> float:
    predicted = fft2c(coil_images)
    diff = predicted[split.heldout_mask] - y.data[split.heldout_mask]
    return float(np.mean(np.abs(diff) ** 2, dtype=np.float64))


def _default_reconstructor(
    maps: SensitivityMaps | None,
    fit_config: FitConfig,
    input_shape: tuple[int, int, int],
    arch: str,
) -> Reconstructor:
    def run(y_minus: CoilMeasurement, h: HyperConfig, seed: int) -> np.ndarray:
        if h.sens and maps is None:
            raise ValueError(f"config ({h.label()}) needs sensitivity maps")
        decoder_config = build_decoder_config(h, y_minus, input_shape, arch, seed)
        fc = replace(fit_config, loss_mode="sensmap" if h.sens else "coilwise")
        result = reconstruct_full(y_minus, decoder_config, fc, maps=maps if h.sens else None)
        return result.coil_images

    return run


def score_config(
    h: HyperConfig,
    y: CoilMeasurement,
    q: float = 0.1,
    k: int = 2,
    seed: int = 0,
    maps: SensitivityMaps | None = None,
    fit_config: FitConfig | None = None,
    mode: str = "columns",
    input_shape: tuple[int, int, int] = (256, 8, 6),
    arch: str = "convdecoder",
    reconstructor: Reconstructor | None = None,
) -> FoldScores:
    """Mean held-out k-space MSE of one configuration over k random splits."""
    if k < 1:
        raise ValueError("need at least one fold")
    if reconstructor is None:
        reconstructor = _default_reconstructor(maps, fit_config or FitConfig(), input_shape, arch)
    errors = []
    for fold_seed in _fold_seeds(seed, k):
        split = holdout_split(y, q, np.random.default_rng(fold_seed), mode)
        coil_images = reconstructor(split.y_minus, h, fold_seed)
        errors.append(_holdout_mse(coil_images, y, split))
    return FoldScores(h, tuple(errors))


def autotune(
    y: CoilMeasurement,
    grid: Sequence[HyperConfig] | None = None,
    q: float = 0.1,
    k: int = 2,
    seed: int = 0,
    maps: SensitivityMaps | None = None,
    fit_config: FitConfig | None = None,
    mode: str = "columns",
    input_shape: tuple[int, int, int] = (256, 8, 6),
    arch: str = "convdecoder",
    reconstructor: Reconstructor | None = None,
    jobs: int = 1,
) -> AutotuneResult:
    """Score every grid point and pick the lowest mean holdout error.

    All configurations see the same k splits, so scores are paired.  Ties
    are broken by smaller parameter count, then by grid order.
    """
    grid = tuple(grid) if grid is not None else default_grid()
    if not grid:
        raise ValueError("empty configuration grid")

    def score(h: HyperConfig) -> FoldScores | Exception:
        try:
            return score_config(
                h, y, q, k, seed, maps, fit_config, mode, input_shape, arch, reconstructor
            )
        except (ValueError, RuntimeError, FloatingPointError) as exc:
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(score, grid))
    else:
        outcomes = [score(h) for h in grid]

    table = [s for s in outcomes if isinstance(s, FoldScores)]
    if not table:
        details = "; ".join(f"({h.label()}): {exc}" for h, exc in zip(grid, outcomes))
        raise RuntimeError(f"every configuration failed: {details}")

    def rank(entry: FoldScores) -> tuple[float, int, int]:
        cfg = build_decoder_config(entry.config, y, input_shape, arch)
        return (entry.mean_error, param_count(cfg), grid.index(entry.config))

    best = min(table, key=rank)
    return AutotuneResult(best=best.config, table=tuple(table))

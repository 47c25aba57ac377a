"""Fitting un-trained decoders to masked multicoil measurements.

The measurement loss is 0.5 * sum of squared residuals between masked
k-space predictions and the measured data.  Its gradient with respect to
the decoder output is computed analytically (the masked Fourier operator is
linear, so the gradient is just the adjoint applied to the residual) and
injected into the autodiff graph as the seed of the backward pass.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .decoders import DecoderConfig, DecoderState, forward, init_decoder
from .mri import (
    CoilMeasurement,
    SensitivityMaps,
    channels_to_complex,
    complex_to_channels,
    data_consistency,
    fft2c,
    rss,
)
from .tensor import ParamStore, Tensor

__all__ = [
    "FitConfig",
    "FitResult",
    "ReconResult",
    "EnsembleResult",
    "FitDivergenceError",
    "AdamState",
    "loss_coilwise",
    "loss_sensmap",
    "adam_step",
    "gd_layerwise_step",
    "schedule_from_recording",
    "fit",
    "reconstruct",
    "reconstruct_full",
    "ensemble_reconstruct",
]

LOSS_MODES = ("coilwise", "sensmap", "single_coil")
OPTIMIZERS = ("adam", "gd_layerwise")


class FitDivergenceError(RuntimeError):
    """The fit produced a non-finite loss or non-finite activations."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"fit diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    loss_mode: str = "coilwise"
    iterations: int = 2500
    optimizer: str = "adam"
    stepsize: float = 0.01
    record_every: int = 10
    record_stepsizes: bool = False
    gd_schedule: dict | None = None
    seed: int = 0

    def __post_init__(self):
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.loss_mode!r}, expected one of {LOSS_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be positive")
        if self.optimizer == "gd_layerwise" and self.gd_schedule is None:
            raise ValueError("gd_layerwise needs a gd_schedule")


@dataclass
class FitResult:
    final_loss: float
    loss_trace: list[tuple[int, float]]
    wall_seconds: float
    iterations: int
    stepsizes: list[dict[int, float]] | None = None


@dataclass
class ReconResult:
    image: np.ndarray
    coil_images: np.ndarray
    fit: FitResult
    state: DecoderState


@dataclass
class EnsembleResult:
    image: np.ndarray
    member_images: list[np.ndarray]
    seeds: tuple[int, ...]


# ---------------------------------------------------------------------------
# losses


def _attach_scalar(out: Tensor, value: float, seed: np.ndarray) -> Tensor:
    """Make a scalar loss node whose backward pass injects ``seed`` into ``out``."""
    seed = seed.astype(out.data.dtype, copy=False)

    def backward(g: np.ndarray):
        return (float(g) * seed,)

    return Tensor(np.asarray(value, dtype=np.float64), parents=(out,), backward_fn=backward)


def _masked_residual(pred_images: np.ndarray, y: CoilMeasurement) -> tuple[np.ndarray, float]:
    """Residual on the sampled columns (zero elsewhere) and 0.5 * its energy."""
    k = fft2c(pred_images)
    cols = list(y.mask.sampled_columns)
    r = np.zeros_like(k)
    r[..., cols] = k[..., cols] - y.data[..., cols]
    value = 0.5 * float(np.sum(np.abs(r) ** 2, dtype=np.float64))
    return r, value


def _loss_from_output(out: Tensor, y: CoilMeasurement, maps: SensitivityMaps | None) -> Tensor:
    if maps is None:
        pred = channels_to_complex(out.data)
        if pred.shape[0] != y.n_coils:
            raise ValueError(
                f"decoder emits {pred.shape[0]} coil images, measurement has {y.n_coils} coils"
            )
        r, value = _masked_residual(pred, y)
        seed = complex_to_channels(fft2c(r, inverse=True))
    else:
        if out.data.shape[0] != 2:
            raise ValueError("sensitivity-weighted loss needs a 2-channel (one image) decoder output")
        if maps.n_coils != y.n_coils:
            raise ValueError(f"maps have {maps.n_coils} coils, measurement has {y.n_coils}")
        g = channels_to_complex(out.data)[0]
        r, value = _masked_residual(maps.maps * g[None], y)
        combined = np.sum(np.conj(maps.maps) * fft2c(r, inverse=True), axis=0)
        seed = complex_to_channels(combined)
    return _attach_scalar(out, value, seed)


def loss_coilwise(state: DecoderState, y: CoilMeasurement) -> Tensor:
    """Per-coil k-space loss: the decoder emits every coil image itself."""
    return _loss_from_output(forward(state), y, None)


def loss_sensmap(state: DecoderState, y: CoilMeasurement, maps: SensitivityMaps) -> Tensor:
    """Sensitivity-weighted loss: the decoder emits one image, maps project it to coils."""
    return _loss_from_output(forward(state), y, maps)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, grads: dict[str, np.ndarray], state: AdamState, stepsize: float) -> None:
    """One Adam update (bias-corrected first and second moments) in place."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, tensor, _ in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor.data -= stepsize * (m / c1) / (np.sqrt(v / c2) + state.eps)


def effective_stepsizes(params: ParamStore, state: AdamState, stepsize: float) -> dict[int, float]:
    """Per-layer multiplier Adam currently applies to a unit gradient.

    Summarised by the median over the layer's parameters: the mean would be
    dominated by entries whose second moment is still near zero (their
    multiplier approaches stepsize / eps).
    """
    c2 = 1.0 - state.beta2 ** max(state.t, 1)
    per_layer: dict[int, list[np.ndarray]] = {}
    for name, _, layer in params.items():
        v = state.v.get(name)
        if v is None:
            continue
        mult = stepsize / (np.sqrt(v / c2) + state.eps)
        per_layer.setdefault(layer, []).append(mult.ravel())
    return {layer: float(np.median(np.concatenate(chunks))) for layer, chunks in per_layer.items()}


def gd_layerwise_step(params: ParamStore, grads: dict[str, np.ndarray], schedule: dict, t: int) -> None:
    """Plain gradient descent with one stepsize per layer.

    ``schedule`` maps a layer index to either a float or a callable of the
    iteration number.
    """
    for name, tensor, layer in params.items():
        if layer not in schedule:
            raise KeyError(f"gd schedule has no stepsize for layer {layer} (parameter {name!r})")
        eta = schedule[layer]
        if callable(eta):
            eta = eta(t)
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        tensor.data -= eta * g


def schedule_from_recording(recording: list[dict[int, float]]) -> dict:
    """Turn per-iteration effective stepsizes from an Adam run into a gd schedule.

    Iterations beyond the recorded range reuse the last recorded value.
    """
    if not recording:
        raise ValueError("empty stepsize recording")
    layers = recording[0].keys()

    def make(layer):
        series = [entry[layer] for entry in recording]
        return lambda t: series[min(t - 1, len(series) - 1)]

    return {layer: make(layer) for layer in layers}


# ---------------------------------------------------------------------------
# fit loop


def _check_compat(state: DecoderState, y: CoilMeasurement, config: FitConfig, maps) -> None:
    out_ch = state.config.out_channels
    if state.config.output_shape != y.grid_shape:
        raise ValueError(
            f"decoder output {state.config.output_shape} does not match measurement grid {y.grid_shape}"
        )
    if config.loss_mode == "coilwise":
        if out_ch != 2 * y.n_coils:
            raise ValueError(f"coilwise fit needs out_channels == {2 * y.n_coils}, decoder has {out_ch}")
    elif config.loss_mode == "single_coil":
        if y.n_coils != 1:
            raise ValueError(f"single_coil fit needs a 1-coil measurement, got {y.n_coils} coils")
        if out_ch != 2:
            raise ValueError(f"single_coil fit needs out_channels == 2, decoder has {out_ch}")
    else:
        if maps is None:
            raise ValueError("sensmap fit needs sensitivity maps")
        if out_ch != 2:
            raise ValueError(f"sensmap fit needs out_channels == 2, decoder has {out_ch}")
        if maps.grid_shape != y.grid_shape:
            raise ValueError("maps grid does not match the measurement grid")


def fit(
    state: DecoderState,
    y: CoilMeasurement,
    config: FitConfig,
    maps: SensitivityMaps | None = None,
) -> FitResult:
    """Optimise the decoder parameters against one measurement, in place.

    Runs the fixed iteration budget; there is no early stopping.  The loss
    trace records iteration 1, every ``record_every``-th iteration and the
    final one.
    """
    _check_compat(state, y, config, maps)
    use_maps = maps if config.loss_mode == "sensmap" else None

    adam = AdamState()
    trace: list[tuple[int, float]] = []
    recorded: list[dict[int, float]] | None = [] if config.record_stepsizes else None
    start = time.perf_counter()
    value = float("nan")
    for t in range(1, config.iterations + 1):
        state.params.zero_grad()
        try:
            loss = _loss_from_output(forward(state), y, use_maps)
        except FloatingPointError as exc:
            raise FitDivergenceError(t, str(exc)) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise FitDivergenceError(t, f"loss value {value}")
        loss.backward()
        grads = {
            name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
            for name, tensor, _ in state.params.items()
        }
        try:
            if config.optimizer == "adam":
                adam_step(state.params, grads, adam, config.stepsize)
                if recorded is not None:
                    recorded.append(effective_stepsizes(state.params, adam, config.stepsize))
            else:
                gd_layerwise_step(state.params, grads, config.gd_schedule, t)
        except FloatingPointError as exc:
            raise FitDivergenceError(t, str(exc)) from exc
        if t == 1 or t % config.record_every == 0 or t == config.iterations:
            trace.append((t, value))
    return FitResult(
        final_loss=value,
        loss_trace=trace,
        wall_seconds=time.perf_counter() - start,
        iterations=config.iterations,
        stepsizes=recorded,
    )


# ---------------------------------------------------------------------------
# reconstruction


def _combine_sensmap(dc_images: np.ndarray, maps: SensitivityMaps) -> np.ndarray:
    power = np.sum(np.abs(maps.maps) ** 2, axis=0)
    combined = np.sum(np.conj(maps.maps) * dc_images, axis=0)
    safe = np.where(power > 0, power, 1.0)
    return np.where(power > 0, combined / safe, 0)


def reconstruct_full(
    y: CoilMeasurement,
    decoder_config: DecoderConfig,
    fit_config: FitConfig,
    maps: SensitivityMaps | None = None,
    state: DecoderState | None = None,
) -> ReconResult:
    """Fit a decoder to ``y`` and apply the measured-data replacement step.

    Pass ``state`` to warm-start from existing parameters; it must have been
    built from ``decoder_config``.
    """
    if state is None:
        state = init_decoder(decoder_config)
    elif state.config != decoder_config:
        raise ValueError("warm-start state was built from a different decoder config")
    result = fit(state, y, fit_config, maps=maps)
    out = forward(state).data
    if fit_config.loss_mode == "sensmap":
        g = channels_to_complex(out)[0]
        dc = data_consistency(maps.maps * g[None], y)
        image = np.abs(_combine_sensmap(dc, maps))
    else:
        dc = data_consistency(channels_to_complex(out), y)
        image = rss(dc)
    return ReconResult(image=image, coil_images=dc, fit=result, state=state)


def reconstruct(
    y: CoilMeasurement,
    decoder_config: DecoderConfig,
    fit_config: FitConfig,
    maps: SensitivityMaps | None = None,
    state: DecoderState | None = None,
) -> np.ndarray:
    """Convenience wrapper returning only the reconstructed magnitude image."""
    return reconstruct_full(y, decoder_config, fit_config, maps=maps, state=state).image


def ensemble_reconstruct(
    y: CoilMeasurement,
    decoder_config: DecoderConfig,
    fit_config: FitConfig,
    seeds,
    maps: SensitivityMaps | None = None,
    jobs: int = 1,
) -> EnsembleResult:
    """Average independently initialised reconstructions.

    Every member uses the same architecture and fit settings but its own
    initialisation seed.  With one seed this reduces to a single
    :func:`reconstruct` call.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ValueError("ensemble needs at least one seed")

    def member(seed: int) -> np.ndarray:
        try:
            cfg = replace(decoder_config, seed=seed)
            return reconstruct(y, cfg, fit_config, maps=maps)
        except Exception as exc:
            raise RuntimeError(f"ensemble member with seed {seed} failed: {exc}") from exc

    if jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            images = list(pool.map(member, seeds))
    else:
        images = [member(s) for s in seeds]
    mean = np.mean(np.stack(images), axis=0)
    return EnsembleResult(image=mean, member_images=images, seeds=seeds)

"""Un-trained convolutional decoder architectures.

A decoder maps a fixed random tensor z through a stack of upsample /
convolve / ReLU / channel-normalise blocks to an image-sized output.  Two
variants are provided: ``convdecoder`` (nearest-neighbour upsampling, 3x3
convolutions) and ``deepdecoder`` (bilinear upsampling, 1x1 convolutions).
Nothing here is ever trained on a dataset; the parameters are fitted to a
single measurement by the routines in :mod:`umri.fitting`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import ParamStore, Tensor, batchnorm_channels, conv2d, relu, upsample

__all__ = [
    "DecoderConfig",
    "DecoderState",
    "LayerSpec",
    "ConfigMismatchError",
    "size_schedule",
    "layer_plan",
    "param_count",
    "init_decoder",
    "forward",
    "forward_with_activations",
    "save_params",
    "load_params",
    "layer_probe",
    "ProbeResult",
]

ARCHITECTURES = ("convdecoder", "deepdecoder")
SCHEDULES = ("geometric", "linear")

PARAMS_MAGIC = b"UMRIW\x00"
PARAMS_VERSION = 1


class ConfigMismatchError(ValueError):
    """Raised when saved parameters were produced under a different config."""


@dataclass(frozen=True)
class DecoderConfig:
    """Architecture hyperparameters; two equal configs build identical decoders."""

    arch: str = "convdecoder"
    n_layers: int = 5
    channels: int = 64
    input_shape: tuple[int, int, int] = (256, 8, 6)
    output_shape: tuple[int, int] = (128, 96)
    out_channels: int = 30
    seed: int = 0
    schedule: str = "geometric"

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}, expected one of {ARCHITECTURES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown size schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.n_layers < 2:
            raise ValueError("a decoder needs at least 2 layers")
        if self.channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        c0, h0, w0 = self.input_shape
        if c0 < 1 or h0 < 1 or w0 < 1:
            raise ValueError("input shape entries must be positive")
        h, w = self.output_shape
        if h0 > h or w0 > w:
            raise ValueError("input spatial size cannot exceed the output size")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the structural plan a decoder is built from."""

    index: int
    kind: str  # "hidden" or "final"
    in_channels: int
    out_channels: int
    kernel: int
    upsample_to: tuple[int, int] | None
    upsample_mode: str | None


@dataclass
class DecoderState:
    """A config together with its drawn input tensor and parameters."""

    config: DecoderConfig
    z: np.ndarray
    params: ParamStore

    @property
    def dtype(self):
        return self.z.dtype


def _schedule_1d(n_in: int, n_out: int, n_layers: int, kind: str) -> list[int]:
    sizes = []
    for i in range(n_layers):
        t = i / (n_layers - 1)
        if kind == "geometric":
            s = n_in * (n_out / n_in) ** t
        else:
            s = n_in + (n_out - n_in) * t
        sizes.append(int(round(s)))
    sizes[0], sizes[-1] = n_in, n_out
    return sizes


def size_schedule(
    input_hw: tuple[int, int], output_hw: tuple[int, int], n_layers: int, kind: str = "geometric"
) -> list[tuple[int, int]]:
    """Spatial size at every layer, from the input extent up to the output.

    The geometric schedule multiplies by a constant per-layer growth factor
    (rounded to integers); the linear one adds a constant increment.  Both
    hit the endpoints exactly and are nondecreasing.
    """
    if kind not in SCHEDULES:
        raise ValueError(f"unknown size schedule {kind!r}")
    if n_layers < 2:
        raise ValueError("a schedule needs at least 2 layers")
    hs = _schedule_1d(input_hw[0], output_hw[0], n_layers, kind)
    ws = _schedule_1d(input_hw[1], output_hw[1], n_layers, kind)
    return list(zip(hs, ws))


def layer_plan(config: DecoderConfig) -> list[LayerSpec]:
    """Structural plan: n_layers - 1 hidden blocks plus a final 1x1 projection.

    Hidden block i upsamples to the i-th scheduled size and then convolves;
    the final layer only mixes channels.
    """
    sizes = size_schedule(config.input_shape[1:], config.output_shape, config.n_layers, config.schedule)
    kernel = 3 if config.arch == "convdecoder" else 1
    mode = "nearest" if config.arch == "convdecoder" else "bilinear"
    plan: list[LayerSpec] = []
    in_ch = config.input_shape[0]
    for i in range(1, config.n_layers):
        plan.append(
            LayerSpec(
                index=i,
                kind="hidden",
                in_channels=in_ch,
                out_channels=config.channels,
                kernel=kernel,
                upsample_to=sizes[i],
                upsample_mode=mode,
            )
        )
        in_ch = config.channels
    plan.append(
        LayerSpec(
            index=config.n_layers,
            kind="final",
            in_channels=in_ch,
            out_channels=config.out_channels,
            kernel=1,
            upsample_to=None,
            upsample_mode=None,
        )
    )
    return plan


def param_count(config: DecoderConfig) -> int:
    """Number of fitted scalars (conv weights and biases, norm scales and shifts)."""
    total = 0
    for spec in layer_plan(config):
        total += spec.out_channels * spec.in_channels * spec.kernel**2 + spec.out_channels
        if spec.kind == "hidden":
            total += 2 * spec.out_channels
    return total


def init_decoder(config: DecoderConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> DecoderState:
    """Draw z and fresh parameters.

    Draw order is fixed (z first, then each layer's conv weight in plan
    order) so that a given seed always produces bit-identical states.
    Conv weights are uniform on +-1/sqrt(fan_in), biases start at zero,
    normalisation scales at one and shifts at zero.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    z = rng.standard_normal(config.input_shape).astype(dtype)
    params = ParamStore()
    for spec in layer_plan(config):
        fan_in = spec.in_channels * spec.kernel**2
        bound = 1.0 / np.sqrt(fan_in)
        shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        weight = rng.uniform(-bound, bound, size=shape).astype(dtype)
        prefix = f"layer{spec.index}"
        params.add(f"{prefix}.conv.weight", Tensor(weight, requires_grad=True), spec.index)
        params.add(
            f"{prefix}.conv.bias",
            Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
            spec.index,
        )
        if spec.kind == "hidden":
            params.add(
                f"{prefix}.norm.scale",
                Tensor(np.ones(spec.out_channels, dtype=dtype), requires_grad=True),
                spec.index,
            )
            params.add(
                f"{prefix}.norm.shift",
                Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True),
                spec.index,
            )
    return DecoderState(config=config, z=z, params=params)


def _run(state: DecoderState, collect: bool):
    params = state.params
    x = Tensor(state.z)
    activations: list[np.ndarray] = []
    for spec in layer_plan(state.config):
        prefix = f"layer{spec.index}"
        if spec.kind == "hidden":
            x = upsample(x, spec.upsample_to, mode=spec.upsample_mode)
            x = conv2d(x, params.get(f"{prefix}.conv.weight"), params.get(f"{prefix}.conv.bias"))
            # check here, before the ReLU masks NaNs by comparing them false
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite activations in layer {spec.index}")
            x = relu(x)
            x = batchnorm_channels(x, params.get(f"{prefix}.norm.scale"), params.get(f"{prefix}.norm.shift"))
        else:
            x = conv2d(x, params.get(f"{prefix}.conv.weight"), params.get(f"{prefix}.conv.bias"))
            if not np.all(np.isfinite(x.data)):
                raise FloatingPointError(f"non-finite activations in layer {spec.index}")
        if collect and spec.kind == "hidden":
            activations.append(x.data)
    return x, activations


def forward(state: DecoderState) -> Tensor:
    """Decode z to an (out_channels, H, W) tensor through the current parameters."""
    out, _ = _run(state, collect=False)
    return out


def forward_with_activations(state: DecoderState) -> tuple[Tensor, list[np.ndarray]]:
    """Like :func:`forward` but also returns each hidden block's output array."""
    return _run(state, collect=True)


# ---------------------------------------------------------------------------
# parameter serialization


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("parameter file is truncated")
    return buf


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode()
    (rank,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32)


def save_params(state: DecoderState, path) -> None:
    """Write z and all parameters as named float32 tensors with a config digest."""
    config_json = state.config.canonical_json().encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<H", PARAMS_VERSION))
        fh.write(state.config.digest())
        fh.write(struct.pack("<I", len(config_json)))
        fh.write(config_json)
        names = state.params.names()
        fh.write(struct.pack("<I", 1 + len(names)))
        _write_tensor(fh, "z", state.z)
        for name in names:
            _write_tensor(fh, name, state.params.get(name).data)


def load_params(config: DecoderConfig, path) -> DecoderState:
    """Rebuild a decoder state from disk; the stored config must match exactly."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(PARAMS_MAGIC)) != PARAMS_MAGIC:
            raise ValueError(f"{path}: not a decoder parameter file")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != PARAMS_VERSION:
            raise ValueError(f"{path}: unsupported parameter file version {version}")
        digest = _read_exact(fh, 32)
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        stored_json = _read_exact(fh, config_len).decode()
        if digest != config.digest():
            stored = json.loads(stored_json)
            requested = asdict(config)
            diffs = [
                f"{key}: saved={stored.get(key)!r} requested={requested.get(key)!r}"
                for key in sorted(set(stored) | set(requested))
                if stored.get(key) != _jsonish(requested.get(key))
            ]
            raise ConfigMismatchError(
                "saved parameters were produced under a different config: " + "; ".join(diffs)
            )
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = dict(_read_tensor(fh) for _ in range(count))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")

    if "z" not in tensors:
        raise ValueError(f"{path}: missing input tensor 'z'")
    state = init_decoder(config)
    z = tensors.pop("z")
    if z.shape != state.z.shape:
        raise ValueError(f"stored z has shape {z.shape}, config expects {state.z.shape}")
    state.z = z
    missing = set(state.params.names()) - set(tensors)
    extra = set(tensors) - set(state.params.names())
    if missing or extra:
        raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    state.params.load_values(tensors)
    return state


def _jsonish(value):
    # tuples become lists on the JSON round trip
    if isinstance(value, tuple):
        return [_jsonish(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# layer probing


@dataclass(frozen=True)
class ProbeResult:
    layer: int
    fitted: np.ndarray
    target: np.ndarray
    residual: float
    relative_residual: float


@lru_cache(maxsize=128)
def _box_average_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix that averages source cells over fractional boxes."""
    if n_out > n_in:
        raise ValueError("box averaging cannot enlarge")
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        lo = i * ratio
        hi = (i + 1) * ratio
        j = int(np.floor(lo))
        while j < hi and j < n_in:
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / ratio
            j += 1
    return m


def downsample_box(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Area-average a 2-D image down to ``size``."""
    rows = _box_average_matrix(image.shape[0], size[0])
    cols = _box_average_matrix(image.shape[1], size[1])
    return rows @ image @ cols.T


def layer_probe(state: DecoderState, target: np.ndarray) -> list[ProbeResult]:
    """How much of ``target`` each hidden layer's channels can already express.

    For every hidden block output A (channels x h x w) this solves the least
    squares problem min_a || sum_c a_c A_c - t ||_2, where t is the target
    box-averaged down to the block's resolution, and reports the fitted
    image together with the residual norm.
    """
    if target.shape != state.config.output_shape:
        raise ValueError(f"target shape {target.shape} does not match decoder output {state.config.output_shape}")
    _, activations = forward_with_activations(state)
    results = []
    for spec, act in zip([s for s in layer_plan(state.config) if s.kind == "hidden"], activations):
        t_small = downsample_box(np.asarray(target, dtype=np.float64), act.shape[1:])
        design = act.reshape(act.shape[0], -1).T.astype(np.float64)
        coeffs, _, _, _ = np.linalg.lstsq(design, t_small.ravel(), rcond=None)
        fitted = (design @ coeffs).reshape(t_small.shape)
        residual = float(np.linalg.norm(fitted - t_small))
        norm = float(np.linalg.norm(t_small))
        results.append(
            ProbeResult(
                layer=spec.index,
                fitted=fitted,
                target=t_small,
                residual=residual,
                relative_residual=residual / norm if norm > 0 else residual,
            )
        )
    return results

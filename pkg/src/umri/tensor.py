"""Minimal reverse-mode autodiff over numpy arrays.

Implements exactly the operations a convolutional image decoder needs:
3x3 / 1x1 convolutions, nearest and bilinear upsampling, ReLU, per-channel
batch normalization and a half-sum-of-squares loss.  Everything runs on
plain ``numpy.float32`` by default; pass ``float64`` arrays when you need
the extra headroom for gradient verification.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "ParamStore",
    "conv2d",
    "upsample",
    "relu",
    "batchnorm_channels",
    "mse",
    "grad_check",
]

BN_EPS = 1e-5


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it.

    ``parents`` and ``backward_fn`` are filled in by the operations below;
    leaves created by callers normally only set ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
    ):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            raise TypeError(f"Tensor data must be float32 or float64, got {self.data.dtype}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward_fn = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """Backpropagate from this node.

        ``gradient`` defaults to 1 for scalar tensors; non-scalar roots must
        pass an explicit seed of matching shape.
        """
        if gradient is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient seed needs a scalar tensor")
            gradient = np.ones_like(self.data)
        gradient = np.asarray(gradient, dtype=self.data.dtype)
        if gradient.shape != self.data.shape:
            raise ValueError(f"gradient seed shape {gradient.shape} != tensor shape {self.data.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(gradient)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            parent_grads = node._backward_fn(node.grad)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is not None and parent.requires_grad_path():
                    parent._accumulate(pg)

    def requires_grad_path(self) -> bool:
        """True when gradients should flow into this node."""
        return self.requires_grad or bool(self._parents)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, parents=parents, backward_fn=backward_fn)
    return out


class ParamStore:
    """Ordered, uniquely named parameter tensors tagged with a layer index."""

    def __init__(self):
        self._entries: dict[str, tuple[Tensor, int]] = {}

    def add(self, name: str, tensor: Tensor, layer: int) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        tensor.requires_grad = True
        self._entries[name] = (tensor, int(layer))
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def get(self, name: str) -> Tensor:
        return self._entries[name][0]

    def layer_of(self, name: str) -> int:
        return self._entries[name][1]

    def items(self) -> Iterable[tuple[str, Tensor, int]]:
        for name, (tensor, layer) in self._entries.items():
            yield name, tensor, layer

    def tensors(self) -> list[Tensor]:
        return [t for t, _ in self._entries.values()]

    def zero_grad(self) -> None:
        for tensor, _ in self._entries.values():
            tensor.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t, _ in self._entries.values())

    def copy_values(self) -> dict[str, np.ndarray]:
        """Snapshot of the raw arrays, for saving or warm starts."""
        return {name: t.data.copy() for name, (t, _) in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._entries:
                raise KeyError(f"unknown parameter name: {name!r}")
            tensor = self._entries[name][0]
            if tensor.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {tensor.data.shape} vs {arr.shape}")
            tensor.data = arr.astype(tensor.data.dtype, copy=True)


# ---------------------------------------------------------------------------
# convolution


def _im2col3(x_padded: np.ndarray) -> np.ndarray:
    """(C, H+2, W+2) zero-padded input -> (C*9, H*W) patch matrix."""
    c = x_padded.shape[0]
    h = x_padded.shape[1] - 2
    w = x_padded.shape[2] - 2
    view = np.lib.stride_tricks.sliding_window_view(x_padded, (3, 3), axis=(1, 2))
    return view.transpose(0, 3, 4, 1, 2).reshape(c * 9, h * w)


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2-D convolution over a (C, H, W) tensor.

    Kernel size 1 applies a pointwise channel mix; kernel size 3 uses zero
    padding of one pixel so the spatial size is preserved.  Implemented as
    im2col plus one matrix product per call.
    """
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be (C, H, W), got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be (O, C, k, k), got shape {weight.shape}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if in_ch != x.shape[0]:
        raise ValueError(f"weight expects {in_ch} input channels, input has {x.shape[0]}")
    if bias.data.shape != (out_ch,):
        raise ValueError(f"bias must have shape ({out_ch},), got {bias.data.shape}")

    c, h, w = x.shape
    x_data = x.data

    if kh == 1:
        w2d = weight.data.reshape(out_ch, in_ch)
        out = w2d @ x_data.reshape(c, h * w)
        out = out.reshape(out_ch, h, w) + bias.data[:, None, None]

        def backward(g: np.ndarray):
            g2d = g.reshape(out_ch, h * w)
            dw = (g2d @ x_data.reshape(c, h * w).T).reshape(weight.shape)
            db = g.sum(axis=(1, 2))
            dx = None
            if x.requires_grad_path():
                dx = (w2d.T @ g2d).reshape(c, h, w)
            return dx, dw, db

        return _result(out, (x, weight, bias), backward)

    w2d = weight.data.reshape(out_ch, in_ch * 9)
    col = _im2col3(_pad1(x_data))
    out = (w2d @ col).reshape(out_ch, h, w) + bias.data[:, None, None]
    del col  # recomputed on demand in backward; keeping it would dominate memory

    def backward(g: np.ndarray):
        g2d = g.reshape(out_ch, h * w)
        dw = (g2d @ _im2col3(_pad1(x_data)).T).reshape(weight.shape)
        db = g.sum(axis=(1, 2))
        dx = None
        if x.requires_grad_path():
            # gradient w.r.t. the input is a convolution of g with the
            # channel-transposed, spatially flipped kernel
            w_flip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            dx = (w_flip.reshape(in_ch, out_ch * 9) @ _im2col3(_pad1(g))).reshape(c, h, w)
        return dx, dw, db

    return _result(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# upsampling


@lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix for one axis."""
    m = np.zeros((n_out, n_in))
    if mode == "nearest":
        for i in range(n_out):
            m[i, (i * n_in) // n_out] = 1.0
    elif mode == "bilinear":
        # half-pixel-centre convention with edge clamping
        for i in range(n_out):
            src = (i + 0.5) * n_in / n_out - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            lo = int(np.floor(src))
            hi = min(lo + 1, n_in - 1)
            frac = src - lo
            m[i, lo] += 1.0 - frac
            m[i, hi] += frac
    else:
        raise ValueError(f"unknown upsample mode: {mode!r}")
    return m


def upsample(x: Tensor, size: tuple[int, int], mode: str = "nearest") -> Tensor:
    """Resize a (C, H, W) tensor to (C, *size) by nearest or bilinear interpolation.

    The resize is a fixed linear map (a separable pair of interpolation
    matrices), so the backward pass is its exact adjoint.
    """
    if x.data.ndim != 3:
        raise ValueError(f"upsample input must be (C, H, W), got shape {x.shape}")
    h_out, w_out = size
    _, h_in, w_in = x.shape
    if h_out < h_in or w_out < w_in:
        raise ValueError(f"upsample cannot shrink: {h_in}x{w_in} -> {h_out}x{w_out}")

    dtype = x.data.dtype
    rows = _resize_matrix(h_in, h_out, mode).astype(dtype)
    cols = _resize_matrix(w_in, w_out, mode).astype(dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g: np.ndarray):
        return (np.matmul(rows.T, np.matmul(g, cols)),)

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# pointwise and normalization ops


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(g: np.ndarray):
        return (np.where(mask, g, 0),)

    return _result(out, (x,), backward)


def batchnorm_channels(x: Tensor, scale: Tensor, shift: Tensor, eps: float = BN_EPS) -> Tensor:
    """Normalize each channel of a (C, H, W) tensor over its spatial extent.

    Statistics come from the single image being fitted (there is no batch
    and no running average).  Uses the biased variance with ``eps`` added
    before the square root.
    """
    if x.data.ndim != 3:
        raise ValueError(f"batchnorm input must be (C, H, W), got shape {x.shape}")
    c, h, w = x.shape
    n = h * w
    if n < 2:
        raise ValueError("batchnorm needs at least 2 spatial samples per channel")
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ValueError(f"scale/shift must have shape ({c},)")

    mu = x.data.mean(axis=(1, 2), keepdims=True)
    centred = x.data - mu
    var = np.mean(centred * centred, axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    out = xhat * scale.data[:, None, None] + shift.data[:, None, None]

    def backward(g: np.ndarray):
        dscale = np.sum(g * xhat, axis=(1, 2))
        dshift = np.sum(g, axis=(1, 2))
        dx = None
        if x.requires_grad_path():
            dxhat = g * scale.data[:, None, None]
            # standard single-pass batchnorm backward, per channel
            sum_dxhat = dxhat.sum(axis=(1, 2), keepdims=True)
            sum_dxhat_xhat = np.sum(dxhat * xhat, axis=(1, 2), keepdims=True)
            dx = inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n)
        return dx, dscale, dshift

    return _result(out, (x, scale, shift), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Half sum of squared differences, as a scalar tensor."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    value = np.asarray(0.5 * np.sum(diff * diff), dtype=a.data.dtype)

    def backward(g: np.ndarray):
        ga = g * diff
        return ga, -ga

    return _result(value, (a, b), backward)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f: Callable[[], Tensor], params: ParamStore, step: float = 1e-6) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must build a fresh scalar Tensor from the current parameter values
    on every call.  Returns the worst relative error over every parameter
    entry, where the relative error of an autodiff/finite-difference pair
    (a, d) is ``|a - d| / max(|a|, |d|, floor)``.  The floor guards pairs
    that are both almost zero: it is ``1e-3`` times the largest gradient
    magnitude seen, with an absolute minimum of 1e-12.
    """
    params.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise FloatingPointError("non-finite value at the evaluation point")
    out.backward()

    analytic: dict[str, np.ndarray] = {}
    for name, tensor, _ in params.items():
        analytic[name] = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.copy()

    numeric: dict[str, np.ndarray] = {}
    for name, tensor, _ in params.items():
        fd = np.zeros_like(tensor.data, dtype=np.float64)
        flat = tensor.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = float(f().data)
            flat[idx] = orig - step
            lo = float(f().data)
            flat[idx] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite value while perturbing {name!r}")
            fd_flat[idx] = (hi - lo) / (2.0 * step)
        numeric[name] = fd

    scale = 0.0
    for name in analytic:
        scale = max(scale, float(np.max(np.abs(analytic[name]), initial=0.0)))
        scale = max(scale, float(np.max(np.abs(numeric[name]), initial=0.0)))
    floor = max(1e-12, 1e-3 * scale)

    worst = 0.0
    for name in analytic:
        a = analytic[name].astype(np.float64)
        d = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(d)), floor)
        worst = max(worst, float(np.max(np.abs(a - d) / denom, initial=0.0)))
    return worst

"""Dense numpy kernels: same-padded 2D convolution, ReLU, Sobel, Adam, gradient checking.

Feature maps are float64 arrays laid out ``(C, H, W)`` or batched ``(N, C, H, W)``.
Every op accepts either layout and returns the same layout it was given.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class ShapeError(ValueError):
    """Raised when array dimensions disagree with what an op expects."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("feature map rank", "3 (C,H,W) or 4 (N,C,H,W)", x.ndim)


def _unbatch(x: np.ndarray, squeeze: bool) -> np.ndarray:
    return x[0] if squeeze else x


@dataclass
class ConvParams:
    """Kernel ``(out_ch, in_ch, k, k)`` and bias ``(out_ch,)`` of a same-padded conv."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2] != self.kernel.shape[3]:
            raise ShapeError("kernel", "(out_ch, in_ch, k, k)", self.kernel.shape)
        if self.k not in (1, 3):
            raise ShapeError("kernel size", "1 or 3", self.k)
        if self.bias.shape != (self.out_ch,):
            raise ShapeError("bias", (self.out_ch,), self.bias.shape)

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def k(self) -> int:
        return self.kernel.shape[2]

    @property
    def padding(self) -> int:
        return (self.k - 1) // 2

    @classmethod
    def zeros(cls, out_ch: int, in_ch: int, k: int) -> "ConvParams":
        return cls(np.zeros((out_ch, in_ch, k, k)), np.zeros(out_ch))

    @classmethod
    def random(cls, out_ch: int, in_ch: int, k: int, rng: np.random.Generator, gain: float = 1.0) -> "ConvParams":
        # He-style fan-in scaling
        std = gain * np.sqrt(2.0 / (in_ch * k * k))
        return cls(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), np.zeros(out_ch))

    def copy(self) -> "ConvParams":
        return ConvParams(self.kernel.copy(), self.bias.copy())


def _windows(xb: np.ndarray, k: int) -> np.ndarray:
    p = (k - 1) // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    # (N, C, H, W, k, k) strided view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Zero-padded, stride-1 cross-correlation; output spatial shape equals input's."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64))
    if xb.shape[1] != params.in_ch:
        raise ShapeError("input channels", params.in_ch, xb.shape[1])
    if params.k == 1:
        out = np.einsum("oc,nchw->nohw", params.kernel[:, :, 0, 0], xb, optimize=True)
    else:
        out = np.einsum("nchwij,ocij->nohw", _windows(xb, params.k), params.kernel, optimize=True)
    out += params.bias[None, :, None, None]
    return _unbatch(out, squeeze)


def conv2d_backward(grad_out: np.ndarray, cached_input: np.ndarray, params: ConvParams):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d_forward`."""
    xb, squeeze = _as_batch(np.asarray(cached_input, dtype=np.float64))
    gb, _ = _as_batch(np.asarray(grad_out, dtype=np.float64))
    n, c, h, w = xb.shape
    if gb.shape != (n, params.out_ch, h, w):
        raise ShapeError("grad_out", (n, params.out_ch, h, w), gb.shape)
    grad_bias = gb.sum(axis=(0, 2, 3))
    if params.k == 1:
        grad_kernel = np.einsum("nohw,nchw->oc", gb, xb, optimize=True)[:, :, None, None]
        grad_input = np.einsum("oc,nohw->nchw", params.kernel[:, :, 0, 0], gb, optimize=True)
        return _unbatch(grad_input, squeeze), grad_kernel, grad_bias
    k, p = params.k, params.padding
    grad_kernel = np.einsum("nohw,nchwij->ocij", gb, _windows(xb, k), optimize=True)
    gcols = np.einsum("ocij,nohw->nchwij", params.kernel, gb, optimize=True)
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for dy in range(k):
        for dx in range(k):
            gxp[:, :, dy:dy + h, dx:dx + w] += gcols[..., dy, dx]
    grad_input = np.ascontiguousarray(gxp[:, :, p:p + h, p:p + w])
    return _unbatch(grad_input, squeeze), grad_kernel, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return grad_out * (cached_input > 0.0)


def _depthwise3x3(xb: np.ndarray, kern: np.ndarray) -> np.ndarray:
    h, w = xb.shape[-2:]
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(xb)
    for dy in range(3):
        for dx in range(3):
            if kern[dy, dx] != 0.0:
                out += kern[dy, dx] * xp[:, :, dy:dy + h, dx:dx + w]
    return out


def _depthwise3x3_adjoint(gb: np.ndarray, kern: np.ndarray) -> np.ndarray:
    h, w = gb.shape[-2:]
    gxp = np.zeros(gb.shape[:2] + (h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            if kern[dy, dx] != 0.0:
                gxp[:, :, dy:dy + h, dx:dx + w] += kern[dy, dx] * gb
    return gxp[:, :, 1:h + 1, 1:w + 1]


def sobel_depthwise(x: np.ndarray) -> np.ndarray:
    """Per-channel Sobel responses, channels ordered ``[x(c0), y(c0), x(c1), y(c1), ...]``."""
    xb, squeeze = _as_batch(np.asarray(x, dtype=np.float64))
    n, c, h, w = xb.shape
    out = np.empty((n, c, 2, h, w))
    out[:, :, 0] = _depthwise3x3(xb, SOBEL_X)
    out[:, :, 1] = _depthwise3x3(xb, SOBEL_Y)
    return _unbatch(out.reshape(n, 2 * c, h, w), squeeze)


def sobel_backward(grad_out: np.ndarray) -> np.ndarray:
    gb, squeeze = _as_batch(np.asarray(grad_out, dtype=np.float64))
    n, c2, h, w = gb.shape
    g = gb.reshape(n, c2 // 2, 2, h, w)
    grad = _depthwise3x3_adjoint(g[:, :, 0], SOBEL_X) + _depthwise3x3_adjoint(g[:, :, 1], SOBEL_Y)
    return _unbatch(grad, squeeze)


def sobel_kernel_bank(channels: int) -> ConvParams:
    """The Sobel filters as a dense ``(2C, C, 3, 3)`` conv, for cross-checking."""
    kernel = np.zeros((2 * channels, channels, 3, 3))
    for c in range(channels):
        kernel[2 * c, c] = SOBEL_X
        kernel[2 * c + 1, c] = SOBEL_Y
    return ConvParams(kernel, np.zeros(2 * channels))


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter block {name!r}")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r}", params[name].shape, g.shape)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(params)`` must return ``(loss, grads)``. Up to ``n_samples``
    coordinates are drawn across all parameter blocks (all of them if fewer).
    Parameters are restored before returning.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    _, analytic = loss_fn(params)
    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if len(coords) > n_samples:
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        up, _ = loss_fn(params)
        flat[i] = orig - eps
        down, _ = loss_fn(params)
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        a = float(np.asarray(analytic[name]).reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst

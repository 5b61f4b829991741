"""Shared NCA update rule and the asynchronous rollout loop.

One residual step, computed for every cell from the same snapshot::

    features = [conv3x3(S), sobel_x(S), sobel_y(S)]      # 3C channels
    hidden   = relu(conv1x1(features))                   # F channels
    residual = conv1x1(hidden)                           # 2 + k channels

and a per-cell Bernoulli(fire_rate) mask decides which cells commit
``S[E, H] += residual``. The sensor channel V is never written.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .grid_state import EX, ChannelLayout, StateGrid, mean_estimate
from .tensor_nn import (
    ConvParams,
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    relu,
    relu_backward,
    sobel_backward,
    sobel_depthwise,
)

PARAM_BLOCKS = ("perception", "processing", "output")


@dataclass
class RolloutConfig:
    steps_min: int = 15
    steps_max: int = 30
    fire_rate: float = 0.5

    def __post_init__(self):
        if not 0 <= self.steps_min <= self.steps_max:
            raise ValueError(f"need 0 <= steps_min <= steps_max, got {self.steps_min}, {self.steps_max}")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError(f"fire_rate must be in (0, 1], got {self.fire_rate}")

    def draw_steps(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.steps_min, self.steps_max + 1))

    def scaled(self, factor: float) -> "RolloutConfig":
        """Step range stretched by ``factor`` (used when running on larger grids)."""
        factor = max(factor, 1.0)
        return RolloutConfig(
            int(round(self.steps_min * factor)), int(round(self.steps_max * factor)), self.fire_rate
        )


@dataclass
class NcaModel:
    perception: ConvParams
    processing: ConvParams
    output: ConvParams
    layout: ChannelLayout = field(default_factory=ChannelLayout)

    def __post_init__(self):
        c = self.layout.channels
        if self.perception.kernel.shape[:3] != (c, c, 3):
            raise ShapeError("perception kernel", (c, c, 3, 3), self.perception.kernel.shape)
        if self.processing.in_ch != 3 * c or self.processing.k != 1:
            raise ShapeError("processing kernel", (self.width, 3 * c, 1, 1), self.processing.kernel.shape)
        if self.output.kernel.shape[:3] != (self.layout.updated, self.width, 1):
            raise ShapeError("output kernel", (self.layout.updated, self.width, 1, 1), self.output.kernel.shape)

    @classmethod
    def create(cls, hidden: int = 8, width: int = 64, seed: int = 0) -> "NcaModel":
        """Fresh model: random perception/processing, output layer exactly zero."""
        layout = ChannelLayout(hidden)
        c = layout.channels
        rng = np.random.default_rng(seed)
        perception = ConvParams.random(c, c, 3, rng)
        processing = ConvParams.random(width, 3 * c, 1, rng)
        output = ConvParams.zeros(layout.updated, width, 1)
        return cls(perception, processing, output, layout)

    @property
    def width(self) -> int:
        return self.processing.out_ch

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every parameter array, keyed ``"<layer>.<kernel|bias>"``."""
        out = {}
        for name in PARAM_BLOCKS:
            conv = getattr(self, name)
            out[f"{name}.kernel"] = conv.kernel
            out[f"{name}.bias"] = conv.bias
        return out

    def copy(self) -> "NcaModel":
        return NcaModel(self.perception.copy(), self.processing.copy(), self.output.copy(), self.layout)

    def to_dict(self) -> dict:
        return {
            "hidden": self.layout.hidden,
            "width": self.width,
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self.params().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NcaModel":
        model = cls.create(d["hidden"], d["width"])
        for k, arr in model.params().items():
            entry = d["params"][k]
            if list(arr.shape) != entry["shape"]:
                raise ShapeError(k, tuple(arr.shape), tuple(entry["shape"]))
            arr[...] = np.asarray(entry["data"], dtype=np.float64).reshape(arr.shape)
        return model

    # batched (N, C, H, W) forward/backward of the residual network

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate([conv2d_forward(x, self.perception), sobel_depthwise(x)], axis=1)

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.residual_with_cache(x)[0]

    def residual_with_cache(self, x: np.ndarray):
        feat = self.features(x)
        pre = conv2d_forward(feat, self.processing)
        hid = relu(pre)
        r = conv2d_forward(hid, self.output)
        return r, (x, feat, pre, hid)

    def residual_backward(self, dr: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x, feat, pre, hid = cache
        c = self.layout.channels
        dhid, g_ok, g_ob = conv2d_backward(dr, hid, self.output)
        dpre = relu_backward(dhid, pre)
        dfeat, g_pk, g_pb = conv2d_backward(dpre, feat, self.processing)
        dx_conv, g_ck, g_cb = conv2d_backward(dfeat[:, :c], x, self.perception)
        dx = dx_conv + sobel_backward(dfeat[:, c:])
        grads = {
            "perception.kernel": g_ck,
            "perception.bias": g_cb,
            "processing.kernel": g_pk,
            "processing.bias": g_pb,
            "output.kernel": g_ok,
            "output.bias": g_ob,
        }
        return dx, grads


def perceive(grid: StateGrid, model: NcaModel) -> np.ndarray:
    """Moore-neighborhood features ``(3C, H, W)`` of one grid."""
    if grid.layout.channels != model.layout.channels:
        raise ShapeError("grid channels", model.layout.channels, grid.layout.channels)
    return model.features(grid.tensor[None])[0]


def fire_mask(rng: np.random.Generator, shape: tuple[int, int], fire_rate: float) -> np.ndarray:
    return (rng.random(shape) < fire_rate).astype(np.float64)


def apply_residual(x: np.ndarray, r: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``x`` with ``mask * r`` added to the estimate/hidden channels; batched."""
    out = x.copy()
    out[:, EX:] += mask[:, None] * r
    return out


def update_step(
    grid: StateGrid,
    model: NcaModel,
    rng: np.random.Generator | None = None,
    fire_rate: float = 0.5,
    mask: np.ndarray | None = None,
) -> StateGrid:
    """One asynchronous update. Pass ``mask`` (H, W) to override the random fire mask."""
    if mask is None:
        if rng is None:
            raise ValueError("need an rng or an explicit mask")
        mask = fire_mask(rng, grid.shape, fire_rate)
    r = model.residual(grid.tensor[None])
    out = apply_residual(grid.tensor[None], r, np.asarray(mask, dtype=np.float64)[None])[0]
    return StateGrid(out, grid.layout, grid.pitch)


def rollout(
    grid: StateGrid,
    model: NcaModel,
    cfg: RolloutConfig,
    rng: np.random.Generator,
    trace: IO[str] | None = None,
) -> tuple[StateGrid, int]:
    """Run a random number of steps from ``cfg``; returns the final grid and the step count.

    With ``trace`` set, one JSON line per step is written holding the mean
    estimate and the per-cell estimate offsets.
    """
    steps = cfg.draw_steps(rng)
    for t in range(steps):
        grid = update_step(grid, model, rng, cfg.fire_rate)
        if trace is not None:
            write_trace_record(trace, t + 1, grid)
    return grid, steps


def write_trace_record(fh: IO[str], step: int, grid: StateGrid) -> None:
    rec = {
        "step": step,
        "mean_estimate": mean_estimate(grid).tolist(),
        "offsets": grid.estimate_offsets.tolist(),
    }
    fh.write(json.dumps(rec) + "\n")


def read_trace(lines: Iterable[str]) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]


def forward_trajectory(model: NcaModel, x0: np.ndarray, masks: np.ndarray):
    """Differentiable rollout of a batch.

    ``masks`` is ``(T, N, H, W)``; an entry that should stop early simply gets
    all-zero masks for its remaining steps. Returns the final state and the
    per-step caches :func:`backward_trajectory` needs.
    """
    x = x0
    caches = []
    for t in range(masks.shape[0]):
        if not masks[t].any():
            caches.append(None)
            continue
        r, cache = model.residual_with_cache(x)
        caches.append(cache)
        x = apply_residual(x, r, masks[t])
    return x, caches


def backward_trajectory(model: NcaModel, caches, masks: np.ndarray, dfinal: np.ndarray):
    """Gradients of a loss on the final state w.r.t. parameters and the initial state.

    The fire masks are treated as constants.
    """
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    dx = dfinal.copy()
    for t in range(masks.shape[0] - 1, -1, -1):
        cache = caches[t]
        if cache is None:
            continue
        dr = dx[:, EX:] * masks[t][:, None]
        dprev, g = model.residual_backward(dr, cache)
        for k in grads:
            grads[k] += g[k]
        dx = dx + dprev
    return grads, dx

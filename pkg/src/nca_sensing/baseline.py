"""Centralized comparator: a small CNN that sees the whole grid and regresses the center.

Architecture: conv3x3(1->16) -> ReLU -> conv3x3(16->32) -> ReLU -> flatten ->
fc(32*H*W -> 128) -> ReLU -> fc(128 -> 64) -> ReLU -> fc(64 -> 2).
The flatten ties the model to the grid size it was built for.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor_nn import AdamState, ConvParams, ShapeError, adam_step, conv2d_backward, conv2d_forward, relu, relu_backward
from .training import CurvePoint, EvalResult
from .world import Sample

CONV_WIDTHS = (16, 32)
FC_WIDTHS = (128, 64)


class GridSizeError(ShapeError):
    """A fixed-input model was given a grid of another size."""


@dataclass
class CnnModel:
    dims: tuple[int, int]
    conv1: ConvParams
    conv2: ConvParams
    fc: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def create(cls, dims: tuple[int, int], seed: int = 0) -> "CnnModel":
        h, w = dims
        rng = np.random.default_rng(seed)
        c1, c2 = CONV_WIDTHS
        conv1 = ConvParams.random(c1, 1, 3, rng)
        conv2 = ConvParams.random(c2, c1, 3, rng)
        sizes = [c2 * h * w, *FC_WIDTHS, 2]
        fc = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            fc.append((rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_out, n_in)), np.zeros(n_out)))
        # start predictions at the grid center
        fc[-1] = (fc[-1][0] * 0.1, np.array([w / 2.0, h / 2.0]))
        return cls((h, w), conv1, conv2, fc)

    @classmethod
    def zeros(cls, dims: tuple[int, int]) -> "CnnModel":
        model = cls.create(dims)
        for p in model.params().values():
            p[...] = 0.0
        return model

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "conv1.kernel": self.conv1.kernel,
            "conv1.bias": self.conv1.bias,
            "conv2.kernel": self.conv2.kernel,
            "conv2.bias": self.conv2.bias,
        }
        for i, (wt, b) in enumerate(self.fc, start=1):
            out[f"fc{i}.weight"] = wt
            out[f"fc{i}.bias"] = b
        return out

    def copy(self) -> "CnnModel":
        return CnnModel(self.dims, self.conv1.copy(), self.conv2.copy(), [(w.copy(), b.copy()) for w, b in self.fc])

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in self.params().items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CnnModel":
        model = cls.create(tuple(d["dims"]))
        for k, arr in model.params().items():
            entry = d["params"][k]
            if list(arr.shape) != entry["shape"]:
                raise ShapeError(k, tuple(arr.shape), tuple(entry["shape"]))
            arr[...] = np.asarray(entry["data"], dtype=np.float64).reshape(arr.shape)
        return model

    def check_dims(self, dims: tuple[int, int]) -> None:
        if tuple(dims) != self.dims:
            h, w = self.dims
            raise GridSizeError(f"centralized model built for {h}x{w} grids", self.dims, tuple(dims))

    def forward(self, readings: np.ndarray):
        """Batched forward on ``(N, H, W)`` readings; returns ``(N, 2)`` and a cache."""
        x = np.asarray(readings, dtype=np.float64)
        self.check_dims(x.shape[-2:])
        x = x[:, None]
        z1 = conv2d_forward(x, self.conv1)
        a1 = relu(z1)
        z2 = conv2d_forward(a1, self.conv2)
        a2 = relu(z2)
        acts = [a2.reshape(len(x), -1)]
        pre = []
        for i, (wt, b) in enumerate(self.fc):
            z = acts[-1] @ wt.T + b
            pre.append(z)
            acts.append(relu(z) if i < len(self.fc) - 1 else z)
        return acts[-1], (x, z1, a1, z2, a2, acts, pre)

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        x, z1, a1, z2, a2, acts, pre = cache
        grads = {}
        d = dout
        for i in range(len(self.fc) - 1, -1, -1):
            wt, _ = self.fc[i]
            if i < len(self.fc) - 1:
                d = relu_backward(d, pre[i])
            grads[f"fc{i + 1}.weight"] = d.T @ acts[i]
            grads[f"fc{i + 1}.bias"] = d.sum(axis=0)
            d = d @ wt
        d = relu_backward(d.reshape(a2.shape), z2)
        da1, grads["conv2.kernel"], grads["conv2.bias"] = conv2d_backward(d, a1, self.conv2)
        d = relu_backward(da1, z1)
        _, grads["conv1.kernel"], grads["conv1.bias"] = conv2d_backward(d, x, self.conv1)
        return grads


def cnn_forward(readings: np.ndarray, model: CnnModel) -> np.ndarray:
    """Center estimate (x, y) in tiles for one ``(H, W)`` grid of readings."""
    readings = np.asarray(readings, dtype=np.float64)
    if readings.ndim != 2:
        raise ShapeError("readings", "(H, W)", readings.shape)
    out, _ = model.forward(readings[None])
    return out[0]


def squared_loss_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    n = len(pred)
    return float((diff * diff).sum(axis=1).mean()), 2.0 * diff / n


@dataclass
class CnnTrainConfig:
    total_steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


def cnn_train(train_set: Sequence[Sample], cfg: CnnTrainConfig, model: CnnModel | None = None):
    """Mini-batch Adam on squared center distance; returns (model, training curve)."""
    if not train_set:
        raise ValueError("empty training set")
    dims = train_set[0].grid_shape
    rng = np.random.default_rng(cfg.seed)
    model = model.copy() if model is not None else CnnModel.create(dims, cfg.seed)
    params = model.params()
    opt = AdamState.for_params(params, lr=cfg.lr)
    xs = np.stack([s.readings for s in train_set])
    ys = np.array([s.true_center for s in train_set], dtype=np.float64)
    bs = min(cfg.batch_size, len(train_set))
    curve = []
    for step in range(cfg.total_steps):
        idx = np.sort(rng.choice(len(train_set), size=bs, replace=False))
        pred, cache = model.forward(xs[idx])
        value, dpred = squared_loss_grad(pred, ys[idx])
        grads = model.backward(dpred, cache)
        if cfg.weight_decay:
            for k, g in grads.items():
                if k.endswith(("weight", "kernel")):
                    g += cfg.weight_decay * params[k]
        adam_step(params, grads, opt)
        curve.append(CurvePoint(step, value, float(np.hypot(*(pred - ys[idx]).T).mean())))
    return model, curve


def cnn_evaluate(model: CnnModel, dataset: Sequence[Sample]) -> EvalResult:
    if not dataset:
        return EvalResult(np.zeros(0))
    ests = np.array([cnn_forward(s.readings, model) for s in dataset])
    truth = np.array([s.true_center for s in dataset], dtype=np.float64)
    return EvalResult(np.hypot(*(ests - truth).T), ests)

"""Pool-based training of the shared NCA rule, evaluation, and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid_state import EX, EY, StateGrid, cell_centers, init_grid, mean_estimate
from .nca import NcaModel, RolloutConfig, backward_trajectory, fire_mask, forward_trajectory, rollout
from .tensor_nn import AdamState, adam_step
from .world import Sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, model: NcaModel):
        super().__init__(f"non-finite loss at training step {step}")
        self.step = step
        self.model = model


@dataclass
class TrainConfig:
    pool_size: int = 64
    batch_size: int = 8
    total_steps: int = 5000
    steps_min: int = 15
    steps_max: int = 30
    fire_rate: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_at: int | None = None
    grad_clip: float | None = 1.0
    bias: bool = True
    hidden: int = 8
    width: int = 64
    seed: int = 0
    mode: str = "binary"
    split_ratio: float = 0.5
    patience: int = 500
    min_delta: float = 1e-4

    def __post_init__(self):
        if self.batch_size > self.pool_size:
            raise ValueError(f"batch_size {self.batch_size} exceeds pool_size {self.pool_size}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")

    @property
    def rollout(self) -> RolloutConfig:
        return RolloutConfig(self.steps_min, self.steps_max, self.fire_rate)


@dataclass
class PoolEntry:
    sample: int
    grid: np.ndarray
    loss: float = math.inf


@dataclass
class CurvePoint:
    step: int
    loss: float
    metric: float


# losses


def agent_errors(grid: StateGrid, center) -> np.ndarray:
    """Per-agent (H, W) Euclidean distance from its absolute estimate to ``center``."""
    h, w = grid.shape
    est = cell_centers(h, w) + grid.tensor[EX:EY + 1]
    d = est - np.asarray(center, dtype=np.float64)[:, None, None]
    return np.sqrt((d * d).sum(axis=0))


def loss(grid: StateGrid, center) -> tuple[float, float]:
    """(training loss, reporting metric): mean squared and mean plain agent distance, in tiles."""
    e = agent_errors(grid, center)
    return float((e * e).mean()), float(e.mean())


def batch_loss_grad(states: np.ndarray, centers: np.ndarray):
    """Mean-over-batch training loss of ``(N, C, H, W)`` states and its gradient w.r.t. the states."""
    n, _, h, w = states.shape
    est = cell_centers(h, w)[None] + states[:, EX:EY + 1]
    diff = est - centers[:, :, None, None]
    sq = (diff * diff).sum(axis=1)
    per_entry = sq.mean(axis=(1, 2))
    grad = np.zeros_like(states)
    grad[:, EX:EY + 1] = 2.0 * diff / (h * w * n)
    metric = np.sqrt(sq).mean(axis=(1, 2))
    return float(per_entry.mean()), grad, per_entry, metric


def split_dataset(dataset: Sequence, ratio: float = 0.5, seed: int = 0) -> tuple[list, list]:
    """Shuffled disjoint split; the first part gets ``ceil(ratio * n)`` items."""
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(math.ceil(ratio * n - 1e-9))
    return [dataset[i] for i in order[:cut]], [dataset[i] for i in order[cut:]]


# training


def _masks_for_batch(rng: np.random.Generator, steps: list[int], dims: tuple[int, int], fire_rate: float) -> np.ndarray:
    t_max = max(steps) if steps else 0
    masks = np.zeros((t_max, len(steps)) + dims)
    for j, s in enumerate(steps):
        for t in range(s):
            masks[t, j] = fire_mask(rng, dims, fire_rate)
    return masks


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> None:
    if max_norm is None:
        return
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def train(
    train_set: Sequence[Sample],
    cfg: TrainConfig,
    model: NcaModel | None = None,
    on_step: Callable[[int, NcaModel, list[PoolEntry]], None] | None = None,
) -> tuple[NcaModel, list[CurvePoint]]:
    """Pool-based BPTT training; see README for the loop.

    Each step draws ``batch_size`` pool entries, resets the worst one to an
    empty grid for a freshly drawn training sample, rolls the batch out for
    15-30 asynchronous steps, backpropagates the final-state loss through every
    step and applies one Adam update to the shared parameters.
    """
    if not train_set:
        raise ValueError("empty training set")
    dims = train_set[0].grid_shape
    if any(s.grid_shape != dims for s in train_set):
        raise ValueError("training samples must share one grid size")
    rng = np.random.default_rng(cfg.seed)
    model = model.copy() if model is not None else NcaModel.create(cfg.hidden, cfg.width, cfg.seed)
    params = model.params()
    opt = AdamState.for_params(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    centers = np.array([s.true_center for s in train_set], dtype=np.float64)

    def fresh(idx: int) -> np.ndarray:
        return init_grid(train_set[idx].readings, cfg.hidden).tensor

    pool = []
    for _ in range(cfg.pool_size):
        idx = int(rng.integers(len(train_set)))
        pool.append(PoolEntry(idx, fresh(idx)))

    curve: list[CurvePoint] = []
    window: list[float] = []
    best, since_best = math.inf, 0
    for step in range(cfg.total_steps):
        if cfg.lr_decay_at is not None and step == cfg.lr_decay_at:
            opt.lr *= 0.1
        batch = np.sort(rng.choice(cfg.pool_size, size=cfg.batch_size, replace=False))
        states = np.stack([pool[i].grid for i in batch])
        tgt = centers[[pool[i].sample for i in batch]]
        _, _, current, _ = batch_loss_grad(states, tgt)
        worst = int(np.argmax(current))
        new_idx = int(rng.integers(len(train_set)))
        entry = pool[batch[worst]]
        entry.sample, entry.grid = new_idx, fresh(new_idx)
        states[worst] = entry.grid
        tgt[worst] = centers[new_idx]

        steps = [cfg.rollout.draw_steps(rng) for _ in batch]
        masks = _masks_for_batch(rng, steps, dims, cfg.fire_rate)
        final, caches = forward_trajectory(model, states, masks)
        value, dfinal, per_entry, metric = batch_loss_grad(final, tgt)
        if not math.isfinite(value):
            raise TrainingDiverged(step, model)
        grads, _ = backward_trajectory(model, caches, masks, dfinal)
        if not cfg.bias:
            for k in grads:
                if k.endswith(".bias"):
                    grads[k][...] = 0.0
        _clip(grads, cfg.grad_clip)
        adam_step(params, grads, opt)
        for j, i in enumerate(batch):
            pool[i].grid = final[j]
            pool[i].loss = float(per_entry[j])
        point = CurvePoint(step, value, float(metric.mean()))
        curve.append(point)
        if on_step is not None:
            on_step(step, model, pool)

        window.append(point.metric)
        if len(window) > 100:
            window.pop(0)
        avg = sum(window) / len(window)
        if len(window) == 100:
            if avg < best - cfg.min_delta:
                best, since_best = avg, 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    log.info("early stop at step %d (moving metric %.4f)", step, avg)
                    break
        if step % 250 == 0:
            log.info("step %5d loss %.4f metric %.4f", step, point.loss, point.metric)
    return model, curve


# evaluation


@dataclass
class EvalResult:
    errors: np.ndarray
    estimates: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def defined(self) -> bool:
        return len(self.errors) > 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors)) if self.defined else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.errors)) if self.defined else math.nan

    def summary(self) -> dict:
        return {"n": len(self.errors), "mean": self.mean, "std": self.std, "defined": self.defined}


def estimate_center(model: NcaModel, readings: np.ndarray, rcfg: RolloutConfig, rng: np.random.Generator) -> np.ndarray:
    grid = init_grid(readings, model.layout.hidden)
    final, _ = rollout(grid, model, rcfg, rng)
    return mean_estimate(final)


def evaluate(model: NcaModel, dataset: Sequence[Sample], rcfg: RolloutConfig | None = None, seed: int = 0) -> EvalResult:
    """Mean-estimate error per sample, each rolled out with its own (seed, index) stream."""
    rcfg = rcfg or RolloutConfig()
    errs, ests = [], []
    for i, s in enumerate(dataset):
        est = estimate_center(model, s.readings, rcfg, np.random.default_rng([seed, i]))
        ests.append(est)
        errs.append(float(np.hypot(*(est - np.asarray(s.true_center)))))
    return EvalResult(np.array(errs), np.array(ests).reshape(-1, 2))


# checkpoints


def save_checkpoint(
    path: str | Path,
    model,
    cfg: TrainConfig | None = None,
    curve: Sequence[CurvePoint] = (),
    model_kind: str = "nca",
    extra: dict | None = None,
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model_kind,
        "model": model.to_dict(),
        "train_config": asdict(cfg) if cfg is not None else None,
        "curve": [[p.step, p.loss, p.metric] for p in curve],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


@dataclass
class Checkpoint:
    model: object
    model_kind: str
    train_config: dict | None
    curve: list[CurvePoint]
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .baseline import CnnModel

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc['format_version']}, expected {CHECKPOINT_VERSION}")
    kind = doc.get("model_kind")
    try:
        if kind == "nca":
            model = NcaModel.from_dict(doc["model"])
        elif kind == "centralized":
            model = CnnModel.from_dict(doc["model"])
        else:
            raise CheckpointError(f"{path}: unknown model_kind {kind!r}")
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed model block ({exc})") from exc
    curve = [CurvePoint(int(s), float(l), float(m)) for s, l, m in doc.get("curve", [])]
    return Checkpoint(model, kind, doc.get("train_config"), curve, doc.get("extra", {}))


def write_curve(curve: Sequence[CurvePoint], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "loss", "metric"])
        for p in curve:
            wr.writerow([p.step, repr(p.loss), repr(p.metric)])

"""Seeded robustness and scaling sweeps, the calibrated/uncalibrated comparison, and result I/O.

Random streams are keyed rather than sequential: trial ``t`` always rolls out
with ``default_rng([seed, t])`` (the same stream :func:`training.evaluate`
gives sample ``t``), and corruption draws are keyed by (seed, stream, condition
value, trial). Results therefore do not depend on worker count or on which
other conditions are in the sweep.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .baseline import CnnModel, GridSizeError, cnn_forward
from .grid_state import PHYSICAL_PITCH_MM
from .nca import NcaModel, RolloutConfig
from .stats import mann_whitney_u
from .training import estimate_center
from .world import Sample, default_shapes, generate_dataset, inject_faults, inject_noise

FAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))
NOISE_LEVELS = tuple(round(0.1 * i, 1) for i in range(11))
SCALE_SIZES = (4, 8, 16, 32, 64)
FULL_SCALE_SIZES = SCALE_SIZES + (100,)

_FAULT_STREAM = 1
_NOISE_STREAM = 2
_SCALE_STREAM = 3


@dataclass
class SweepResult:
    axis: str
    conditions: list
    errors: list[np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def means(self) -> np.ndarray:
        return np.array([np.mean(e) if len(e) else math.nan for e in self.errors])

    @property
    def stds(self) -> np.ndarray:
        return np.array([np.std(e) if len(e) else math.nan for e in self.errors])

    @property
    def trials(self) -> list[int]:
        return [len(e) for e in self.errors]

    def mean_at(self, condition) -> float:
        return float(self.means[self.conditions.index(condition)])

    def summary_rows(self) -> list[dict]:
        return [
            {self.axis: c, "mean": float(m), "std": float(s), "trials": n}
            for c, m, s, n in zip(self.conditions, self.means, self.stds, self.trials)
        ]


def _key(value) -> int:
    return int(round(float(value) * 1_000_000))


def mix_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def predict(model, readings: np.ndarray, rcfg: RolloutConfig, rng: np.random.Generator) -> np.ndarray:
    if isinstance(model, CnnModel):
        return cnn_forward(readings, model)
    return estimate_center(model, readings, rcfg, rng)


def _error(model, readings, center, rcfg, seed, trial) -> float:
    est = predict(model, readings, rcfg, np.random.default_rng([seed, trial]))
    return float(math.hypot(est[0] - center[0], est[1] - center[1]))


def _plain_trial(args, model, rcfg, seed):
    trial, readings, center = args
    return _error(model, readings, center, rcfg, seed, trial)


def _corrupted_trial(args, model, rcfg, seed, kind):
    trial, value, readings, center = args
    rng = np.random.default_rng([seed, _FAULT_STREAM if kind == "fault" else _NOISE_STREAM, _key(value), trial])
    if kind == "fault":
        readings, _ = inject_faults(readings, value, rng)
    elif value > 0:
        readings = inject_noise(readings, value, rng)
    return _error(model, readings, center, rcfg, seed, trial)


def _run(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def _corruption_sweep(kind, model, test_set, values, trials, seed, rcfg, jobs) -> SweepResult:
    if not test_set:
        raise ValueError("empty test set")
    rcfg = rcfg or RolloutConfig()
    picks = [test_set[t % len(test_set)] for t in range(trials)]
    items = [(t, v, s.readings, s.true_center) for v in values for t, s in enumerate(picks)]
    flat = _run(partial(_corrupted_trial, model=model, rcfg=rcfg, seed=seed, kind=kind), items, jobs)
    errors = [np.array(flat[i * trials:(i + 1) * trials]) for i in range(len(values))]
    axis = "fault_fraction" if kind == "fault" else "noise_level"
    return SweepResult(axis, list(values), errors, seed)


def exp_fault(model, test_set: Sequence[Sample], fractions=FAULT_FRACTIONS, trials: int = 100, seed: int = 0,
              rcfg: RolloutConfig | None = None, jobs: int = 1) -> SweepResult:
    """Zero a growing fraction of sensors; trial ``t`` uses test sample ``t`` with a fresh fault mask."""
    return _corruption_sweep("fault", model, test_set, fractions, trials, seed, rcfg, jobs)


def exp_noise(model, test_set: Sequence[Sample], levels=NOISE_LEVELS, trials: int = 100, seed: int = 0,
              rcfg: RolloutConfig | None = None, jobs: int = 1) -> SweepResult:
    """Signal-relative Gaussian noise at each level; trial ``t`` uses test sample ``t``."""
    return _corruption_sweep("noise", model, test_set, levels, trials, seed, rcfg, jobs)


def _scale_item(args, model, base, train_size, scale_steps, seed):
    size, t, readings, center = args
    rcfg = base.scaled(size / train_size) if scale_steps else base
    return _error(model, readings, center, rcfg, seed, t)


def exp_scale(model, sizes=SCALE_SIZES, samples_per_shape: int = 4, seed: int = 0,
              rcfg: RolloutConfig | None = None, scale_steps: bool = False, train_size: int = 8,
              shapes=None, jobs: int = 1, datasets: dict | None = None) -> SweepResult:
    """Evaluate one NCA on binary synthetic grids of several sizes; errors in tiles.

    With ``scale_steps`` the rollout step range is stretched by ``size / train_size``
    so information has time to cross the larger grid.
    """
    if isinstance(model, CnnModel):
        h, w = model.dims
        raise GridSizeError(
            f"centralized model is fixed to {h}x{w} inputs and cannot run on other grid sizes", model.dims, "any"
        )
    if not isinstance(model, NcaModel):
        raise TypeError(f"exp_scale needs an NcaModel, got {type(model).__name__}")
    rcfg = rcfg or RolloutConfig()
    shapes = shapes if shapes is not None else default_shapes()
    items = []
    counts = []
    for size in sizes:
        data = datasets[size] if datasets and size in datasets else generate_dataset(
            shapes, samples_per_shape, (size, size), "binary", seed=mix_seed(seed, _SCALE_STREAM, size)
        )
        counts.append(len(data))
        items += [(size, t, s.readings, s.true_center) for t, s in enumerate(data)]
    flat = _run(partial(_scale_item, model=model, base=rcfg, train_size=train_size, scale_steps=scale_steps, seed=seed),
                items, jobs)
    errors, i = [], 0
    for n in counts:
        errors.append(np.array(flat[i:i + n]))
        i += n
    return SweepResult("grid_size", list(sizes), errors, seed, {"scale_steps": scale_steps})


@dataclass
class PerformanceResult:
    errors: dict[str, np.ndarray]
    u: float
    p: float
    pitch_mm: float = PHYSICAL_PITCH_MM

    def errors_mm(self, label: str) -> np.ndarray:
        return self.errors[label] * self.pitch_mm

    def as_sweep(self, seed: int = 0) -> SweepResult:
        labels = list(self.errors)
        return SweepResult("dataset", labels, [self.errors[k] for k in labels], seed, {"U": self.u, "p": self.p})


def exp_performance(models: dict, test_sets: dict, rcfg: RolloutConfig | None = None, seed: int = 0,
                    pitch_mm: float = PHYSICAL_PITCH_MM, jobs: int = 1) -> PerformanceResult:
    """Each model on its own test set, then a two-sided Mann-Whitney U between the two error lists."""
    if set(models) != set(test_sets) or len(models) != 2:
        raise ValueError("need exactly two labelled models with matching test sets")
    rcfg = rcfg or RolloutConfig()
    errors = {}
    for label in models:
        data = test_sets[label]
        items = [(t, s.readings, s.true_center) for t, s in enumerate(data)]
        errors[label] = np.array(_run(partial(_plain_trial, model=models[label], rcfg=rcfg, seed=seed), items, jobs))
    a, b = (errors[k] for k in models)
    u, p = mann_whitney_u(a, b)
    return PerformanceResult(errors, u, p, pitch_mm)


# output


def write_results(result: SweepResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["condition", "trial", "error"])
        for cond, errs in zip(result.conditions, result.errors):
            for t, e in enumerate(errs):
                wr.writerow([cond, t, repr(float(e))])


def read_results(path: str | Path, axis: str = "condition") -> SweepResult:
    conds: list = []
    errs: dict = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != ["condition", "trial", "error"]:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rows:
            c = row[0]
            try:
                c = float(c) if "." in c else int(c)
            except ValueError:
                pass
            if c not in errs:
                conds.append(c)
                errs[c] = []
            errs[c].append(float(row[2]))
    return SweepResult(axis, conds, [np.array(errs[c]) for c in conds])


def write_summary(result: SweepResult, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["condition", "mean", "std", "trials"])
        for c, m, s, n in zip(result.conditions, result.means, result.stds, result.trials):
            wr.writerow([c, repr(float(m)), repr(float(s)), n])


def render_plot(result: SweepResult, path: str | Path, ylabel: str = "error (tiles)") -> None:
    """Mean line with a +/- one std band, plus per-condition box plots; SVG output."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "nca-sensing"
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(result.conditions))
    if result.conditions:
        means, stds = result.means, result.stds
        ax.boxplot([e if len(e) else [np.nan] for e in result.errors], positions=xs, widths=0.5, showfliers=False)
        ax.plot(xs, means, "o-", color="tab:green", label="mean")
        ax.fill_between(xs, means - stds, means + stds, color="tab:green", alpha=0.2, label="mean ± std")
        ax.set_xticks(xs, [str(c) for c in result.conditions])
        ax.legend()
    ax.set_xlabel(result.axis)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: str | Path, command: list[str], config: dict, artifacts: dict,
                   checkpoint: str | Path | None = None, results: dict | None = None) -> None:
    doc = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "checkpoint": str(checkpoint) if checkpoint else None,
        "checkpoint_sha256": file_sha256(checkpoint) if checkpoint and Path(checkpoint).exists() else None,
        "artifacts": artifacts,
        "results": results or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

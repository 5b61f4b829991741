"""Agent state layout on the sensor lattice.

Each cell holds ``[V, Ex, Ey, H0 .. H{k-1}]``: the local sensor reading, the
agent's estimate of the object center stored as an offset (in tiles) from the
agent's own cell center, and ``k`` hidden channels for message passing.
Cell ``(row y, col x)`` is centered at ``(x + 0.5, y + 0.5)`` tiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

V = 0
EX = 1
EY = 2
HIDDEN0 = 3

DEFAULT_HIDDEN = 8
PHYSICAL_PITCH_MM = 37.5


@dataclass(frozen=True)
class ChannelLayout:
    hidden: int = DEFAULT_HIDDEN

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"need at least one hidden channel, got {self.hidden}")

    @property
    def channels(self) -> int:
        return 3 + self.hidden

    @property
    def updated(self) -> int:
        """Channels the network writes to (estimate plus hidden)."""
        return 2 + self.hidden


@dataclass
class StateGrid:
    tensor: np.ndarray
    layout: ChannelLayout = field(default_factory=ChannelLayout)
    pitch: float = 1.0

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3 or self.tensor.shape[0] != self.layout.channels:
            raise ValueError(f"state tensor must be ({self.layout.channels}, H, W), got {self.tensor.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]

    @property
    def readings(self) -> np.ndarray:
        return self.tensor[V]

    @property
    def estimate_offsets(self) -> np.ndarray:
        return self.tensor[EX:EY + 1]

    def copy(self) -> "StateGrid":
        return StateGrid(self.tensor.copy(), self.layout, self.pitch)


def init_grid(readings, k: int = DEFAULT_HIDDEN, pitch: float = 1.0) -> StateGrid:
    """Empty state for a set of readings: V set, estimates and hidden channels zero."""
    readings = np.asarray(readings, dtype=np.float64)
    if readings.ndim != 2:
        raise ValueError(f"readings must be 2D (H, W), got shape {readings.shape}")
    if not np.all(np.isfinite(readings)):
        raise ValueError("readings contain non-finite values")
    layout = ChannelLayout(k)
    tensor = np.zeros((layout.channels,) + readings.shape)
    tensor[V] = readings
    return StateGrid(tensor, layout, pitch)


def cell_centers(h: int, w: int) -> np.ndarray:
    """``(2, H, W)`` array of cell-center (x, y) coordinates in tiles."""
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([xs, ys])


def global_estimates(grid: StateGrid) -> np.ndarray:
    """Per-agent absolute estimates as an ``(H, W, 2)`` array of (x, y) in tiles."""
    h, w = grid.shape
    est = cell_centers(h, w) + grid.tensor[EX:EY + 1]
    return np.moveaxis(est, 0, -1)


def mean_estimate(grid: StateGrid) -> np.ndarray:
    """Consensus readout: unweighted mean of every agent's absolute estimate."""
    return global_estimates(grid).reshape(-1, 2).mean(axis=0)

"""Synthetic objects on a sensor grid.

Stands in for the physical sensor array and the camera that provided ground
truth: objects are polygons or discs in tile units, readings come from the
covered fraction of each sensor cell (exact for polygons, supersampled for
discs), and the target is the analytic centroid of the placed footprint.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely

MODES = ("binary", "fractional", "pressure")
SUPERSAMPLE = 16
BINARY_THRESHOLD = 0.5
DEFAULT_MARGIN = 1.0


class EmptyFootprintWarning(UserWarning):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class ShapeSpec:
    name: str
    vertices: tuple[tuple[float, float], ...] | None = None
    radius: float | None = None
    mass: float = 1.0

    def __post_init__(self):
        if (self.vertices is None) == (self.radius is None):
            raise ValueError("a shape is either a polygon or a disc")
        if self.radius is not None and self.radius <= 0:
            raise ValueError(f"disc radius must be positive, got {self.radius}")
        if self.vertices is not None:
            if len(self.vertices) < 3:
                raise ValueError("polygon needs at least 3 vertices")
            if not shapely.LinearRing(self.vertices).is_simple:
                raise ValueError(f"polygon {self.name!r} is self-intersecting")

    @property
    def is_disc(self) -> bool:
        return self.radius is not None

    @property
    def area(self) -> float:
        if self.is_disc:
            return math.pi * self.radius**2
        return abs(polygon_area_centroid(np.asarray(self.vertices))[0])

    @property
    def centroid(self) -> np.ndarray:
        if self.is_disc:
            return np.zeros(2)
        return polygon_area_centroid(np.asarray(self.vertices))[1]


@dataclass(frozen=True)
class Placement:
    x: float
    y: float
    angle: float = 0.0


@dataclass
class Sample:
    readings: np.ndarray
    true_center: tuple[float, float]
    shape: str
    mode: str
    placement: Placement | None = None

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.readings.shape


def rectangle(name: str, w: float, h: float, mass: float = 1.0) -> ShapeSpec:
    return ShapeSpec(name, ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)), mass=mass)


def default_shapes() -> list[ShapeSpec]:
    """Five stand-in test objects, sized in tiles, each centered on its centroid."""
    tri = np.array([(0.0, 0.0), (3.0, 0.0), (0.0, 3.0)])
    tri -= polygon_area_centroid(tri)[1]
    ell = np.array([(0.0, 0.0), (3.0, 0.0), (3.0, 1.5), (1.5, 1.5), (1.5, 3.0), (0.0, 3.0)])
    ell -= polygon_area_centroid(ell)[1]
    return [
        rectangle("square", 2.0, 2.0, mass=4.0),
        rectangle("rectangle", 3.0, 1.5, mass=4.5),
        ShapeSpec("disc", radius=1.25, mass=5.0),
        ShapeSpec("triangle", tuple(map(tuple, tri)), mass=4.5),
        ShapeSpec("l_shape", tuple(map(tuple, ell)), mass=6.75),
    ]


def shape_by_name(name: str) -> ShapeSpec:
    for s in default_shapes():
        if s.name == name:
            return s
    raise KeyError(f"unknown shape {name!r}")


def polygon_area_centroid(vertices: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed shoelace area and centroid of a simple polygon."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = cross.sum() / 2.0
    if abs(area) <= 1e-12:
        raise ValueError("degenerate polygon (zero area)")
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return area, np.array([cx, cy])


def placed_vertices(shape: ShapeSpec, placement: Placement) -> np.ndarray:
    """Polygon vertices rotated about the shape centroid, then translated."""
    v = np.asarray(shape.vertices, dtype=float)
    c = shape.centroid
    cos, sin = math.cos(placement.angle), math.sin(placement.angle)
    rot = np.array([[cos, -sin], [sin, cos]])
    return (v - c) @ rot.T + c + np.array([placement.x, placement.y])


def true_center(shape: ShapeSpec, placement: Placement) -> tuple[float, float]:
    if shape.is_disc:
        return (placement.x, placement.y)
    _, c = polygon_area_centroid(placed_vertices(shape, placement))
    return (float(c[0]), float(c[1]))


def coverage(shape: ShapeSpec, placement: Placement, dims: tuple[int, int], ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each cell covered by the footprint.

    Polygons are intersected with each cell exactly; discs use ``ss x ss``
    point samples per cell.
    """
    h, w = dims
    cov = np.zeros((h, w))
    if shape.is_disc:
        cx, cy, r = placement.x, placement.y, shape.radius
        x0, x1, y0, y1 = cx - r, cx + r, cy - r, cy + r
    else:
        pv = placed_vertices(shape, placement)
        x0, y0 = pv.min(axis=0)
        x1, y1 = pv.max(axis=0)
    c0, c1 = max(int(math.floor(x0)), 0), min(int(math.ceil(x1)), w)
    r0, r1 = max(int(math.floor(y0)), 0), min(int(math.ceil(y1)), h)
    if c0 >= c1 or r0 >= r1:
        return cov
    if not shape.is_disc:
        rows, cols = np.mgrid[r0:r1, c0:c1]
        cells = shapely.box(cols, rows, cols + 1, rows + 1)
        cov[r0:r1, c0:c1] = shapely.area(shapely.intersection(cells, shapely.Polygon(pv)))
        return np.clip(cov, 0.0, 1.0)
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).reshape(-1)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    inside = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    cov[r0:r1, c0:c1] = inside.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    return cov


def rasterize_footprint(shape: ShapeSpec, placement: Placement, dims: tuple[int, int], mode: str = "binary") -> np.ndarray:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    cov = coverage(shape, placement, dims)
    if not cov.any():
        warnings.warn(f"{shape.name} at {placement} does not touch the grid", EmptyFootprintWarning, stacklevel=2)
    if mode == "binary":
        return (cov >= BINARY_THRESHOLD).astype(np.float64)
    if mode == "fractional":
        return cov
    return cov * (shape.mass / shape.area)


def _sample_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def generate_dataset(
    shapes: Sequence[ShapeSpec],
    positions_per_shape: int,
    dims: tuple[int, int],
    mode: str = "binary",
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
) -> list[Sample]:
    """Random placements of every shape; centroids uniform over the grid inset by ``margin`` tiles.

    Each sample has its own RNG stream keyed by (seed, shape index, position
    index), so adding shapes or positions never changes existing samples.
    """
    h, w = dims
    m_x = min(margin, w / 2)
    m_y = min(margin, h / 2)
    out = []
    for si, shape in enumerate(shapes):
        for pi in range(positions_per_shape):
            rng = _sample_rng(seed, si, pi)
            angle = float(rng.uniform(0.0, 2 * math.pi))
            cx = float(rng.uniform(m_x, w - m_x))
            cy = float(rng.uniform(m_y, h - m_y))
            c = shape.centroid
            placement = Placement(cx - c[0], cy - c[1], angle)
            readings = rasterize_footprint(shape, placement, dims, mode)
            out.append(Sample(readings, true_center(shape, placement), shape.name, mode, placement))
    return out


def centered_sample(shape: ShapeSpec, dims: tuple[int, int], mode: str = "binary", angle: float = 0.0) -> Sample:
    h, w = dims
    c = shape.centroid
    placement = Placement(w / 2 - c[0], h / 2 - c[1], angle)
    return Sample(rasterize_footprint(shape, placement, dims, mode), true_center(shape, placement), shape.name, mode, placement)


def n_faults(fraction: float, n_cells: int) -> int:
    # tolerance keeps e.g. 0.57 * 100 from flooring to 56
    return int(math.floor(fraction * n_cells + 1e-9))


def inject_faults(readings: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero ``floor(fraction * N)`` distinct, uniformly chosen cells; returns (readings, mask)."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fault fraction must be in [0, 1], got {fraction}")
    readings = np.asarray(readings, dtype=np.float64)
    k = n_faults(fraction, readings.size)
    mask = np.zeros(readings.shape, dtype=bool)
    if k:
        mask.reshape(-1)[rng.choice(readings.size, size=k, replace=False)] = True
    out = readings.copy()
    out[mask] = 0.0
    return out, mask


def inject_noise(readings: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Add Normal(0, (level * |reading|)^2) to every cell; zero cells stay zero."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"noise level must be in [0, 1], got {level}")
    readings = np.asarray(readings, dtype=np.float64)
    eta = rng.standard_normal(readings.shape)
    return readings + eta * (level * np.abs(readings))


# calibration


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationCurve:
    """Per-cell polynomial ``force = c0 + c1*raw + ... + cd*raw^d``; coeffs shape (H, W, d+1)."""

    coeffs: np.ndarray
    rms: np.ndarray | None = None

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 3:
            raise ValueError(f"coeffs must be (H, W, d+1), got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise CalibrationError("non-finite calibration coefficients")

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1


def fit_calibration(pairs: Iterable[tuple[float, float]], degree: int = 3) -> tuple[np.ndarray, float]:
    """Least-squares polynomial from raw readings to force; returns (coeffs low-order first, RMS residual)."""
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    raw, force = arr[:, 0], arr[:, 1]
    if len(np.unique(raw)) < degree + 1:
        raise CalibrationError(f"degree {degree} fit needs {degree + 1} distinct raw values, got {len(np.unique(raw))}")
    # scale raw to [-1, 1] for conditioning, then map coefficients back
    lo, hi = raw.min(), raw.max()
    mid, half = (hi + lo) / 2, (hi - lo) / 2 if hi > lo else 1.0
    design = np.vander((raw - mid) / half, degree + 1, increasing=True)
    sol, _, rank, _ = np.linalg.lstsq(design, force, rcond=None)
    if rank < degree + 1:
        raise CalibrationError(f"rank-deficient calibration system (rank {rank} < {degree + 1})")
    # sol is in the scaled variable u = (raw - mid) / half; substitute back
    poly = np.polynomial.polynomial.Polynomial(sol)
    shifted = poly(np.polynomial.polynomial.Polynomial([-mid / half, 1.0 / half]))
    coeffs = np.zeros(degree + 1)
    coeffs[: len(shifted.coef)] = shifted.coef
    resid = design @ sol - force
    return coeffs, float(np.sqrt(np.mean(resid**2)))


def horner(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ``sum coeffs[..., i] * x**i`` elementwise; coeffs' last axis is the degree."""
    out = np.zeros_like(x, dtype=np.float64) + coeffs[..., -1]
    for i in range(coeffs.shape[-1] - 2, -1, -1):
        out = out * x + coeffs[..., i]
    return out


def apply_calibration(readings: np.ndarray, curves: CalibrationCurve) -> np.ndarray:
    readings = np.asarray(readings, dtype=np.float64)
    if curves.coeffs.shape[:2] != readings.shape:
        raise CalibrationError(f"calibration covers {curves.coeffs.shape[:2]} cells, readings are {readings.shape}")
    return horner(curves.coeffs, readings)


@dataclass
class SensorBank:
    """Synthetic per-cell sensor response ``raw = gain*f + curve*f^2`` (no-contact reads 0)."""

    gain: np.ndarray
    curve: np.ndarray
    noise: float = 0.0

    @classmethod
    def random(cls, dims: tuple[int, int], seed: int, spread: float = 0.2, curvature: float = 0.05, noise: float = 0.005):
        rng = np.random.default_rng(seed)
        gain = rng.uniform(1.0 - spread, 1.0 + spread, size=dims)
        curve = rng.uniform(-curvature, curvature, size=dims)
        return cls(gain, curve, noise)

    def raw(self, force: np.ndarray) -> np.ndarray:
        return self.gain * force + self.curve * force**2

    def loading_pairs(self, row: int, col: int, rng: np.random.Generator, n: int = 40, f_max: float = 5.886):
        forces = np.linspace(0.04905, f_max, n)
        raw = self.gain[row, col] * forces + self.curve[row, col] * forces**2
        raw = raw + rng.normal(0.0, self.noise, size=n)
        return list(zip(raw.tolist(), forces.tolist()))


def calibrate_bank(bank: SensorBank, degree: int = 3, seed: int = 0) -> CalibrationCurve:
    """Fit one calibration curve per cell from simulated incremental loading."""
    h, w = bank.gain.shape
    rng = np.random.default_rng(seed)
    coeffs = np.zeros((h, w, degree + 1))
    rms = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            coeffs[r, c], rms[r, c] = fit_calibration(bank.loading_pairs(r, c, rng), degree)
    return CalibrationCurve(coeffs, rms)


def uncalibrate(samples: Sequence[Sample], bank: SensorBank) -> list[Sample]:
    """Pressure-mode samples as the raw sensors would report them."""
    return [Sample(bank.raw(s.readings), s.true_center, s.shape, s.mode, s.placement) for s in samples]


def calibrate(samples: Sequence[Sample], curves: CalibrationCurve) -> list[Sample]:
    return [Sample(apply_calibration(s.readings, curves), s.true_center, s.shape, s.mode, s.placement) for s in samples]


# file formats


def save_dataset(samples: Sequence[Sample], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if not samples:
            return
        h, w = samples[0].grid_shape
        wr.writerow(["grid_h", "grid_w", "mode", "cx", "cy", "shape"] + [f"r{r}c{c}" for r in range(h) for c in range(w)])
        for s in samples:
            if s.grid_shape != (h, w):
                raise ValueError(f"mixed grid sizes in one dataset: {s.grid_shape} vs {(h, w)}")
            wr.writerow(
                [h, w, s.mode, repr(float(s.true_center[0])), repr(float(s.true_center[1])), s.shape]
                + [repr(float(v)) for v in s.readings.reshape(-1)]
            )


def load_dataset(path: str | Path) -> list[Sample]:
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None:
            return out
        if header[:6] != ["grid_h", "grid_w", "mode", "cx", "cy", "shape"]:
            raise DatasetFormatError(1, f"unexpected header {header[:6]}")
        for lineno, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                h, w = int(row[0]), int(row[1])
                mode = row[2]
                if mode not in MODES:
                    raise ValueError(f"unknown mode {mode!r}")
                vals = [float(v) for v in row[6:]]
                if len(vals) != h * w:
                    raise ValueError(f"expected {h * w} readings, found {len(vals)}")
                out.append(Sample(np.array(vals).reshape(h, w), (float(row[3]), float(row[4])), row[5], mode))
            except (ValueError, IndexError) as exc:
                raise DatasetFormatError(lineno, str(exc)) from exc
    return out


def save_calibration(curves: CalibrationCurve, path: str | Path) -> None:
    h, w, n = curves.coeffs.shape
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["row", "col"] + [f"c{i}" for i in range(n)])
        for r in range(h):
            for c in range(w):
                wr.writerow([r, c] + [repr(float(v)) for v in curves.coeffs[r, c]])


def load_calibration(path: str | Path) -> CalibrationCurve:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CalibrationError("empty calibration file")
    n = len(rows[0]) - 2
    entries = {}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            entries[int(row[0]), int(row[1])] = [float(v) for v in row[2:]]
        except (ValueError, IndexError) as exc:
            raise DatasetFormatError(lineno, str(exc)) from exc
    h = max(r for r, _ in entries) + 1
    w = max(c for _, c in entries) + 1
    coeffs = np.zeros((h, w, n))
    for r in range(h):
        for c in range(w):
            if (r, c) not in entries:
                raise CalibrationError(f"missing calibration curve for cell ({r}, {c})")
            coeffs[r, c] = entries[r, c]
    return CalibrationCurve(coeffs)

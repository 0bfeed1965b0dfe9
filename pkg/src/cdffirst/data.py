"""Datasets, response normalization, and the synthetic toy tasks.

Every toy task draws ``x ~ U(-1, 1)`` and a 2-D response whose conditional
density is known in closed form, so trained models can be scored against
the truth on a grid.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASKS = ("squares", "half-gaussian", "gaussian-stick", "elastic-ring")

# Scale (standard deviation) of a, b in the half-gaussian task and of a in
# the gaussian-stick task. "N(0, 2)" is read as mean 0, std 2.
HALF_GAUSSIAN_SCALE = 2.0
STICK_SCALE = 1.0
STICK_HALF_LENGTH = 6.0


class DataError(ValueError):
    """Malformed or degenerate input data."""


@dataclass
class NormStats:
    """Per-dimension response range and the induced affine map to [-1, 1]."""

    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self):
        self.y_min = np.asarray(self.y_min, dtype=np.float64).reshape(-1)
        self.y_max = np.asarray(self.y_max, dtype=np.float64).reshape(-1)
        if self.y_min.shape != self.y_max.shape:
            raise DataError("y_min and y_max must have the same length")
        bad = np.flatnonzero(~(self.y_max > self.y_min))
        if bad.size:
            raise DataError(f"degenerate response dimension(s) {bad.tolist()}: y_max must exceed y_min")

    @property
    def jacobian_factors(self) -> np.ndarray:
        return 2.0 / (self.y_max - self.y_min)

    @property
    def log_jacobian(self) -> float:
        return float(np.sum(np.log(self.jacobian_factors)))

    def to_dict(self) -> dict:
        return {"y_min": self.y_min.tolist(), "y_max": self.y_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["y_min"], dtype=np.float64), np.array(d["y_max"], dtype=np.float64))


def compute_norm_stats(y) -> NormStats:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] < 2:
        raise DataError("need at least two rows to compute normalization statistics")
    return NormStats(y.min(axis=0), y.max(axis=0))


def input_norm_stats(x) -> NormStats:
    """Range statistics for conditioning inputs; a constant column gets a unit-width range around its value."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    lo, hi = x.min(axis=0), x.max(axis=0)
    flat = ~(hi > lo)
    return NormStats(np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi))


def normalize(y, stats: NormStats) -> np.ndarray:
    """Map ``y`` to the normalized response space; no clamping."""
    y = np.asarray(y, dtype=np.float64)
    return 2.0 * (y - stats.y_min) / (stats.y_max - stats.y_min) - 1.0


def denormalize(y_tilde, stats: NormStats) -> np.ndarray:
    y_tilde = np.asarray(y_tilde, dtype=np.float64)
    return stats.y_min + 0.5 * (y_tilde + 1.0) * (stats.y_max - stats.y_min)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.x.shape[0] != self.y.shape[0]:
            raise DataError("x and y row counts differ")
        if self.x.shape[0] < 1:
            raise DataError("dataset is empty")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise DataError("dataset contains non-finite values")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dx(self) -> int:
        return self.x.shape[1]

    @property
    def dy(self) -> int:
        return self.y.shape[1]

    @property
    def task(self) -> str | None:
        return self.meta.get("task")

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.source, dict(self.meta))

    def split(self, train_fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        perm = rng.permutation(len(self))
        n_train = int(round(train_fraction * len(self)))
        if not 0 < n_train < len(self):
            raise DataError(f"split leaves an empty side (n={len(self)}, train_fraction={train_fraction})")
        return self.subset(np.sort(perm[:n_train])), self.subset(np.sort(perm[n_train:]))


# ---------------------------------------------------------------------------
# toy tasks


def _check_task(task: str) -> None:
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")


def _rotate(u, v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return u * c - v * s, u * s + v * c


def sample_conditional(task: str, x, rng: np.random.Generator) -> np.ndarray:
    """Draw one response per entry of ``x`` from the task's generator."""
    _check_task(task)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if task == "squares":
        lam = rng.random(n) < 0.5
        a = rng.uniform(-5.0 + x[:, None], -1.0 + x[:, None], size=(n, 2))
        b = rng.uniform(1.0 - x[:, None], 5.0 - x[:, None], size=(n, 2))
        return np.where(lam[:, None], a, b)
    if task == "half-gaussian":
        a = rng.normal(0.0, HALF_GAUSSIAN_SCALE, n)
        b = rng.normal(0.0, HALF_GAUSSIAN_SCALE, n)
        y1, y2 = _rotate(np.abs(a), b, x * np.pi)
        return np.column_stack([y1, y2])
    if task == "gaussian-stick":
        a = rng.normal(0.0, STICK_SCALE, n)
        b = rng.uniform(-STICK_HALF_LENGTH, STICK_HALF_LENGTH, n)
        y1, y2 = _rotate(a, b, 0.5 * (-0.75 + x) * np.pi)
        return np.column_stack([y1, y2])
    d = rng.uniform(0.0, 2.0, n)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([(4.0 + 2.0 * x + d) * np.cos(theta), (4.0 - 2.0 * x + d) * np.sin(theta)])


def sample_toy(task: str, n: int, rng: np.random.Generator) -> Dataset:
    _check_task(task)
    if n < 1:
        raise DataError("n must be at least 1")
    x = rng.uniform(-1.0, 1.0, n)
    y = sample_conditional(task, x, rng)
    return Dataset(x[:, None], y, source=f"toy:{task}", meta={"task": task, "n": int(n)})


def _normal_pdf(z, scale):
    return np.exp(-0.5 * (z / scale) ** 2) / (scale * math.sqrt(2.0 * math.pi))


def _ring_radius_offset(y1, y2, x, iters=80):
    """Solve (y1/(4+2x+d))^2 + (y2/(4-2x+d))^2 = 1 for d in [0, 2].

    The left side is strictly decreasing in d, so bisection finds the unique
    root; points whose root falls outside [0, 2] get NaN.
    """
    a, b = 4.0 + 2.0 * x, 4.0 - 2.0 * x

    def g(d):
        return (y1 / (a + d)) ** 2 + (y2 / (b + d)) ** 2 - 1.0

    inside = (g(0.0) >= 0.0) & (g(2.0) <= 0.0)
    lo = np.zeros_like(y1)
    hi = np.full_like(y1, 2.0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0.0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    return np.where(inside, 0.5 * (lo + hi), np.nan)


def true_density(task: str, x: float, y) -> np.ndarray:
    """Analytic conditional density p(y | x) at the rows of ``y`` (shape (m, 2))."""
    _check_task(task)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    y1, y2 = y[:, 0], y[:, 1]
    x = float(x)
    if task == "squares":
        in_a = (y1 >= -5 + x) & (y1 <= -1 + x) & (y2 >= -5 + x) & (y2 <= -1 + x)
        in_b = (y1 >= 1 - x) & (y1 <= 5 - x) & (y2 >= 1 - x) & (y2 <= 5 - x)
        return (0.5 / 16.0) * (in_a.astype(float) + in_b.astype(float))
    if task == "half-gaussian":
        u, v = _rotate(y1, y2, -x * np.pi)
        dens = 2.0 * _normal_pdf(u, HALF_GAUSSIAN_SCALE) * _normal_pdf(v, HALF_GAUSSIAN_SCALE)
        return np.where(u >= 0.0, dens, 0.0)
    if task == "gaussian-stick":
        u, v = _rotate(y1, y2, -0.5 * (-0.75 + x) * np.pi)
        dens = _normal_pdf(u, STICK_SCALE) / (2.0 * STICK_HALF_LENGTH)
        return np.where(np.abs(v) <= STICK_HALF_LENGTH, dens, 0.0)
    d = _ring_radius_offset(y1, y2, x)
    ok = np.isfinite(d)
    d = np.where(ok, d, 1.0)
    r1, r2 = 4.0 + 2.0 * x + d, 4.0 - 2.0 * x + d
    cos_t, sin_t = y1 / r1, y2 / r2
    jac = np.where(ok, r2 * cos_t**2 + r1 * sin_t**2, 1.0)
    return np.where(ok, 1.0 / (4.0 * np.pi * jac), 0.0)


def support_box(task: str, x: float) -> tuple[tuple[float, float], tuple[float, float]]:
    """Axis-aligned box holding the support (or, for Gaussian tasks, nearly all mass) at ``x``."""
    _check_task(task)
    if task == "squares":
        return (-5.0 + x, 5.0 - x), (-5.0 + x, 5.0 - x)
    if task == "elastic-ring":
        return (-(6.0 + 2 * x), 6.0 + 2 * x), (-(6.0 - 2 * x), 6.0 - 2 * x)
    if task == "half-gaussian":
        r = 4.0 * HALF_GAUSSIAN_SCALE
        return (-r, r), (-r, r)
    r = math.hypot(STICK_HALF_LENGTH, 4.0 * STICK_SCALE) + 0.3
    return (-r, r), (-r, r)


# ---------------------------------------------------------------------------
# CSV io


def load_csv(path, dx: int, dy: int) -> Dataset:
    """Read columns ``x0..x{dx-1}, y0..y{dy-1}`` from a headed CSV file."""
    path = Path(path)
    names = [f"x{j}" for j in range(dx)] + [f"y{j}" for j in range(dy)]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [n for n in names if n not in header]
        if missing:
            raise DataError(f"{path}: dimension mismatch, missing column(s) {missing} (header {header})")
        cols = [header.index(n) for n in names]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(row[c]) for c in cols]
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: parse error: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}:{line_no}: non-finite value in row {line_no - 2}")
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    return Dataset(arr[:, :dx], arr[:, dx:], source=str(path), meta={"csv": str(path)})


def save_csv(dataset: Dataset, path, meta: dict | None = None) -> None:
    """Write ``dataset`` in the loader's schema plus a ``.meta.json`` sidecar."""
    path = Path(path)
    header = [f"x{j}" for j in range(dataset.dx)] + [f"y{j}" for j in range(dataset.dy)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xr, yr in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in (*xr, *yr)])
    if meta is not None:
        sidecar = path.with_name(path.name + ".meta.json")
        sidecar.write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")

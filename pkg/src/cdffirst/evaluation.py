"""Measurements: grid SSE against analytic toy densities, test NLL, PIT
calibration, the finite-difference step sweep and the ablation suite."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TASKS, Dataset, compute_norm_stats, normalize, sample_toy, support_box, true_density
from .model import CondDensityModel, conditional_cdf, log_density_parts
from .training import TrainConfig, TrainResult, train

ABLATION_VARIANTS = ("full", "no-noise", "hard-minmax", "mono-mlp")
DEFAULT_DELTAS = (5e-7, 1e-6, 5e-6, 1e-5, 3e-5)
GRID_PAD = 0.1


@dataclass
class GridSpec:
    """Per-dimension ``(lo, hi, count)`` axes plus the conditioning values."""

    axes: list
    x_values: list = field(default_factory=list)

    def __post_init__(self):
        for lo, hi, count in self.axes:
            if count < 2 or not hi > lo:
                raise ValueError(f"bad grid axis ({lo}, {hi}, {count})")

    def points(self) -> np.ndarray:
        """Grid points in row-major order, shape (prod(counts), n_dims)."""
        lines = [np.linspace(lo, hi, int(count)) for lo, hi, count in self.axes]
        mesh = np.meshgrid(*lines, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


def toy_grid(task: str, x: float, count: int = 50, pad: float = GRID_PAD) -> GridSpec:
    """``count`` x ``count`` grid over the task's support box at ``x``, widened by ``pad`` overall."""
    axes = []
    for lo, hi in support_box(task, x):
        half = 0.5 * (hi - lo) * (1.0 + pad)
        mid = 0.5 * (lo + hi)
        axes.append((mid - half, mid + half, count))
    return GridSpec(axes, [x])


@dataclass
class EvalReport:
    metric: str
    values: dict
    counters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def mean(self) -> float:
        vals = list(self.values.values())
        return float(np.mean(vals)) if vals else math.nan

    def to_text(self) -> str:
        """Line-delimited JSON records.  Wall time is left out so reruns compare byte-equal."""
        lines = [{"metric": self.metric, "condition": k, "value": v} for k, v in self.values.items()]
        lines.append({"metric": self.metric, "mean": self.mean, "counters": self.counters})
        if self.extra:
            lines.append({"extra": self.extra})
        lines.append({"config": self.config})
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in lines)


class OracleDensity:
    """Plug-in "model" returning the analytic toy density."""

    def __init__(self, task: str):
        self.task = task

    def density(self, x, y) -> np.ndarray:
        return true_density(self.task, float(np.asarray(x).reshape(-1)[0]), y)


class ZeroDensity:
    def density(self, x, y) -> np.ndarray:
        return np.zeros(np.atleast_2d(y).shape[0])


def _cond_key(x) -> str:
    return f"x={float(x):g}"


def sse_at(model, task: str, x: float, count: int = 50) -> float:
    pts = toy_grid(task, x, count).points()
    diff = model.density(np.array([x]), pts) - true_density(task, x, pts)
    return float(np.sum(diff * diff))


def sse_on_grid(model, task: str, x_values, count: int = 50) -> EvalReport:
    """Raw sum over a ``count`` x ``count`` grid of squared density errors, per conditioning value."""
    t0 = time.perf_counter()
    values = {_cond_key(x): sse_at(model, task, x, count) for x in x_values}
    return EvalReport("sse", values, config={"task": task, "grid": count, "pad": GRID_PAD},
                      wall_time=time.perf_counter() - t0)


def test_nll(model: CondDensityModel, dataset: Dataset) -> EvalReport:
    """Mean negative log density of the held-out rows, original units."""
    t0 = time.perf_counter()
    logp, n_clamped, n_underflow = log_density_parts(model, dataset.x, dataset.y)
    finite = np.isfinite(logp)
    value = float(-np.mean(logp)) if np.all(finite) else math.inf
    return EvalReport(
        "nll",
        {"test": value},
        counters={"rows": len(dataset), "clamped": n_clamped, "underflow": n_underflow,
                  "nll_finite_rows": float(-np.mean(logp[finite])) if finite.any() else math.nan},
        wall_time=time.perf_counter() - t0,
    )


def pit_values(model: CondDensityModel, dataset: Dataset) -> np.ndarray:
    """F_i(y_i | x, y_<i) for every row and factor, shape (N, dy)."""
    y_t = np.clip(normalize(dataset.y, model.norm), -1.0, 1.0)
    return np.column_stack([conditional_cdf(model, model.scale_x(dataset.x), y_t, i) for i in range(model.cfg.dy)])


def ece_from_pit(u, bins: int = 10):
    """Coverage ECE of PIT values.

    Nominal levels are the bin centres ``q_k = (k - 0.5) / bins``; the
    empirical coverage at ``q_k`` is the fraction of ``u <= q_k``.  Returns
    ``(ece, nominal, empirical)`` with ``ece = mean_k |empirical_k - q_k|``,
    which lies in [0, 0.5].
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    nominal = (np.arange(1, bins + 1) - 0.5) / bins
    empirical = np.array([np.mean(u <= q) for q in nominal])
    return float(np.mean(np.abs(empirical - nominal))), nominal, empirical


def reliability_ece(model: CondDensityModel, dataset: Dataset, bins: int = 10) -> EvalReport:
    """ECE per autoregressive factor, averaged; the curve of each factor goes in ``extra``."""
    t0 = time.perf_counter()
    u = pit_values(model, dataset)
    values, curves = {}, {}
    for i in range(u.shape[1]):
        ece, nominal, empirical = ece_from_pit(u[:, i], bins)
        values[f"y{i}"] = ece
        curves[f"y{i}"] = {"nominal": nominal.tolist(), "empirical": empirical.tolist()}
    return EvalReport("ece", values, counters={"rows": len(dataset), "bins": bins},
                      extra={"reliability": curves}, wall_time=time.perf_counter() - t0)


def emit_density_grid(model, x, grid: GridSpec, path=None) -> str:
    """CSV of ``(y..., density)`` rows in row-major grid order; written to ``path`` if given."""
    pts = grid.points()
    dens = model.density(np.atleast_1d(np.asarray(x, dtype=np.float64)), pts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"y{j}" for j in range(pts.shape[1])] + ["density"])
    for row, d in zip(pts, dens):
        w.writerow([repr(float(v)) for v in row] + [repr(float(d))])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# toy protocols


@dataclass
class ToyProtocol:
    """One train/evaluate recipe on a toy task."""

    task: str = "elastic-ring"
    n_samples: int = 1000
    train_fraction: float = 0.5
    eval_x: tuple = (-0.75, 0.0, 0.75)
    grid: int = 50
    train: TrainConfig = field(default_factory=TrainConfig)
    net: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        self.eval_x = tuple(float(v) for v in self.eval_x)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "n_samples": self.n_samples, "train_fraction": self.train_fraction,
            "eval_x": list(self.eval_x), "grid": self.grid, "train": self.train.to_dict(), "net": dict(self.net),
        }


def toy_split(protocol: ToyProtocol, seed: int) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng([seed, 1])
    full = sample_toy(protocol.task, protocol.n_samples, rng)
    return full.split(protocol.train_fraction, rng)


def run_toy(protocol: ToyProtocol, seed: int, **overrides) -> tuple[TrainResult, EvalReport]:
    """Train on the protocol's data for ``seed`` with early stopping on grid SSE, then score."""
    cfg = replace(protocol.train, seed=seed, **overrides)
    train_set, _ = toy_split(protocol, seed)

    def sse_metric(model):
        return float(np.mean([sse_at(model, protocol.task, x, protocol.grid) for x in protocol.eval_x]))

    result = train(train_set, cfg, protocol.net, eval_fn=sse_metric)
    report = sse_on_grid(result.model, protocol.task, protocol.eval_x, protocol.grid)
    report.config = {**protocol.to_dict(), "train": cfg.to_dict(), "seed": seed,
                     "best_epoch": result.best_epoch, "epochs_run": result.epochs_run}
    return result, report


def _aggregate(metric: str, per_key: dict, config: dict, t0: float) -> EvalReport:
    values = {k: float(np.mean(v)) for k, v in per_key.items()}
    extra = {"per_seed": {k: [float(t) for t in v] for k, v in per_key.items()}}
    return EvalReport(metric, values, config=config, extra=extra, wall_time=time.perf_counter() - t0)


def delta_sweep(protocol: ToyProtocol, deltas=DEFAULT_DELTAS, seeds=(0,)) -> EvalReport:
    """Mean grid SSE per finite-difference step, each averaged over ``seeds``."""
    deltas = [float(d) for d in deltas]
    if not deltas or min(deltas) <= 0:
        raise ValueError("deltas must be a nonempty list of positive steps")
    t0 = time.perf_counter()
    per = {}
    for d in deltas:
        key = f"delta={d:g}"
        per[key] = [run_toy(protocol, s, delta=d)[1].mean for s in seeds]
    return _aggregate("sse", per, {**protocol.to_dict(), "deltas": deltas, "seeds": list(seeds)}, t0)


def ablation_suite(protocol: ToyProtocol, seeds=(0,), variants=ABLATION_VARIANTS) -> EvalReport:
    """Mean grid SSE of each model variant under a shared data/seed protocol."""
    t0 = time.perf_counter()
    per = {}
    per_x = {}
    for v in variants:
        runs = [run_toy(protocol, s, variant=v)[1] for s in seeds]
        per[f"variant={v}"] = [r.mean for r in runs]
        per_x[v] = {k: float(np.mean([r.values[k] for r in runs])) for k in runs[0].values}
    report = _aggregate("sse", per, {**protocol.to_dict(), "variants": list(variants), "seeds": list(seeds)}, t0)
    report.extra["per_condition"] = per_x
    return report


def kfold_indices(n: int, k: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    folds = np.array_split(perm, k)
    for j in range(k):
        test = np.sort(folds[j])
        train_idx = np.sort(np.concatenate([folds[t] for t in range(k) if t != j]))
        yield train_idx, test


"""Conditional density model built from masked SMM heads.

Head ``i`` produces a raw monotone output ``O``; rescaling by its values at
the normalized domain ends gives a CDF with ``F(-1) = 0`` and ``F(1) = 1``
exactly, and a central difference of that CDF gives the density.
"""
from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import NormStats, denormalize, normalize
from .smm import NetworkConfig, ar_mask, condition_embed, init_buffers, init_params, smm_head_forward

CHECKPOINT_FORMAT = "cdffirst-checkpoint"
CHECKPOINT_VERSION = 1
DEGENERATE_RANGE = 1e-12
EVAL_CHUNK = 2048


class DegenerateRangeError(ArithmeticError):
    """A head's output range ``O(1) - O(-1)`` collapsed."""


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig(NetworkConfig):
    delta: float = 5e-6
    log_alpha_init: float = -2.0
    perturb_boundaries: bool = False

    def __post_init__(self):
        super().__post_init__()
        if not self.delta > 0:
            raise ValueError("delta must be positive")


class CondDensityModel:
    """Parameters, normalization statistics and batch-norm buffers of one model.

    ``norm`` maps responses to [-1, 1]; ``x_norm`` (optional) does the same
    for conditioning inputs.
    """

    def __init__(self, cfg: ModelConfig, norm: NormStats, params: dict, buffers: dict | None = None,
                 x_norm: NormStats | None = None):
        if norm.y_min.size != cfg.dy:
            raise ValueError("normalization statistics do not match dy")
        if x_norm is not None and x_norm.y_min.size != cfg.dx:
            raise ValueError("input normalization statistics do not match dx")
        self.cfg = cfg
        self.norm = norm
        self.x_norm = x_norm
        self.params = params
        self.buffers = buffers if buffers is not None else init_buffers(cfg)

    @classmethod
    def create(cls, cfg: ModelConfig, norm: NormStats, rng: np.random.Generator,
               x_norm: NormStats | None = None) -> "CondDensityModel":
        params = init_params(cfg, rng)
        params["log_alpha_x"] = np.full(cfg.dx, float(cfg.log_alpha_init))
        params["log_alpha_y"] = np.full(cfg.dy, float(cfg.log_alpha_init))
        return cls(cfg, norm, params, x_norm=x_norm)

    @property
    def delta(self) -> float:
        return self.cfg.delta

    @property
    def alpha_x(self) -> np.ndarray:
        return np.exp(self.params["log_alpha_x"])

    @property
    def alpha_y(self) -> np.ndarray:
        return np.exp(self.params["log_alpha_y"])

    def copy(self) -> "CondDensityModel":
        return CondDensityModel(
            self.cfg,
            self.norm,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.x_norm,
        )

    def scale_x(self, x) -> np.ndarray:
        """Conditioning inputs in the network's input scale."""
        x = np.asarray(x, dtype=np.float64)
        return x if self.x_norm is None else normalize(x, self.x_norm)

    def density(self, x, y) -> np.ndarray:
        """p(y | x) in original units for one conditioning vector ``x`` and rows ``y``."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        xs = np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(1, -1), (y.shape[0], self.cfg.dx))
        logp, _, _ = log_density_parts(self, xs, y)
        return np.exp(logp)


# ---------------------------------------------------------------------------
# core evaluation (accepts arrays or tape nodes)


def head_contexts(p, cfg: NetworkConfig, x_hat, y_hat, i: int) -> list:
    """Contexts for head ``i``: the shared embedding of ``[x_hat, y_hat * mask_i]``."""
    mask = ar_mask(i, cfg.dy)
    z = ad.concat([x_hat, ad.mul(y_hat, mask)], axis=1)
    return condition_embed(p, cfg, z)


def head_cdf(p, cfg, buffers, i, contexts, points, lower=-1.0, upper=1.0, bn_update=False):
    """Boundary-normalized CDF of one head at each row of ``points`` (shape (m, N)).

    ``lower``/``upper`` are the boundary inputs; they default to the domain
    ends and may be per-row nodes when boundaries are perturbed.  All
    evaluations for a sample share that sample's context.
    """
    points = list(points)
    m = len(points)
    n = np.shape(ad.value(points[0]))[0]
    lower = ad.mul(np.ones(n), lower) if not isinstance(lower, ad.Node) else lower
    upper = ad.mul(np.ones(n), upper) if not isinstance(upper, ad.Node) else upper
    stacked = ad.concat(points + [lower, upper], axis=0)
    ctx = [ad.tile_rows(c, m + 2) for c in contexts]
    out = ad.reshape(smm_head_forward(p, cfg, i, stacked, ctx, buffers, bn_update), (m + 2, n))
    o_min = out[m]
    o_max = out[m + 1]
    span = ad.sub(o_max, o_min)
    if np.any(ad.value(span) < DEGENERATE_RANGE):
        raise DegenerateRangeError(f"head {i}: output range O(1) - O(-1) below {DEGENERATE_RANGE}")
    return ad.div(ad.sub(out[:m], o_min), span)


def factor_log_pdf(p, cfg, buffers, x_hat, y_hat, i, delta, lower=-1.0, upper=1.0, bn_update=False):
    """log p(y_hat_i | x_hat, y_hat_<i) in normalized units by central differences.

    Returns ``(log_pdf, n_underflow)``; non-positive densities map to -1e6.
    """
    contexts = head_contexts(p, cfg, x_hat, y_hat, i)
    yi = y_hat[:, i] if isinstance(y_hat, ad.Node) else np.asarray(y_hat)[:, i]
    F = head_cdf(p, cfg, buffers, i, contexts, [ad.add(yi, delta), ad.sub(yi, delta)], lower, upper, bn_update)
    pdf = ad.mul(ad.sub(F[0], F[1]), 1.0 / (2.0 * delta))
    return ad.safe_log(pdf)


# ---------------------------------------------------------------------------
# public evaluation api (plain arrays, inference mode: no noise)


def _as_rows(a, width):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, width) if width > 1 or a.size == 0 else a[:, None]
    return a


def _chunks(n):
    for s in range(0, n, EVAL_CHUNK):
        yield slice(s, min(n, s + EVAL_CHUNK))


def conditional_cdf(model: CondDensityModel, x_hat, y_hat, i: int, points=None) -> np.ndarray:
    """F_i at ``y_hat[:, i]`` (or at ``points``, one per row) given ``x_hat`` and ``y_hat[:, :i]``."""
    cfg = model.cfg
    x_hat = _as_rows(x_hat, cfg.dx)
    y_hat = _as_rows(y_hat, cfg.dy)
    pts = y_hat[:, i] if points is None else np.broadcast_to(np.asarray(points, dtype=np.float64), (y_hat.shape[0],))
    out = np.empty(y_hat.shape[0])
    for sl in _chunks(y_hat.shape[0]):
        ctx = head_contexts(model.params, cfg, x_hat[sl], y_hat[sl], i)
        out[sl] = head_cdf(model.params, cfg, model.buffers, i, ctx, [pts[sl]])[0]
    return out


def conditional_pdf(model: CondDensityModel, x_hat, y_hat, i: int, delta: float | None = None) -> np.ndarray:
    """Density of factor ``i`` in normalized units, by central differences of the CDF."""
    cfg = model.cfg
    delta = model.delta if delta is None else float(delta)
    x_hat = _as_rows(x_hat, cfg.dx)
    y_hat = _as_rows(y_hat, cfg.dy)
    out = np.empty(y_hat.shape[0])
    for sl in _chunks(y_hat.shape[0]):
        ctx = head_contexts(model.params, cfg, x_hat[sl], y_hat[sl], i)
        yi = y_hat[sl, i]
        F = head_cdf(model.params, cfg, model.buffers, i, ctx, [yi + delta, yi - delta])
        out[sl] = (F[0] - F[1]) / (2.0 * delta)
    return out


def log_density_parts(model: CondDensityModel, x, y):
    """``(log p(y|x), n_clamped, n_underflow)`` in original units.

    Responses outside the training range are clamped to it; rows whose
    density underflows to zero get ``-inf``.
    """
    cfg = model.cfg
    x = model.scale_x(_as_rows(x, cfg.dx))
    y = _as_rows(y, cfg.dy)
    y_t = normalize(y, model.norm)
    outside = (y_t < -1.0) | (y_t > 1.0)
    n_clamped = int(np.count_nonzero(np.any(outside, axis=1)))
    y_t = np.clip(y_t, -1.0, 1.0)
    total = np.zeros(y.shape[0])
    for i in range(cfg.dy):
        pdf = conditional_pdf(model, x, y_t, i)
        with np.errstate(divide="ignore"):
            total += np.where(pdf > 0.0, np.log(np.where(pdf > 0.0, pdf, 1.0)), -np.inf)
    n_underflow = int(np.count_nonzero(np.isneginf(total)))
    return total + model.norm.log_jacobian, n_clamped, n_underflow


def joint_log_density(model: CondDensityModel, x, y) -> np.ndarray:
    logp, n_clamped, _ = log_density_parts(model, x, y)
    if n_clamped:
        warnings.warn(f"{n_clamped} response row(s) outside the training range were clamped", stacklevel=2)
    return logp


def cdf_inverse(model: CondDensityModel, x, y_prev, u, i: int | None = None, tol: float = 1e-10) -> np.ndarray:
    """Solve ``F_i(t | x, y_prev) = u`` for ``t`` in [-1, 1] by bisection.

    ``x`` is in the network's input scale (see ``CondDensityModel.scale_x``)
    and ``y_prev`` holds the normalized responses ``y_<i`` (shape (N, i));
    ``i`` defaults to the column count of ``y_prev``.
    """
    cfg = model.cfg
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    x = np.broadcast_to(_as_rows(x, cfg.dx), (u.size, cfg.dx))
    y_prev = np.asarray(y_prev, dtype=np.float64).reshape(u.size, -1)
    if i is None:
        i = y_prev.shape[1]
    if tol <= 0:
        raise ValueError("tol must be positive")
    y_ctx = np.zeros((u.size, cfg.dy))
    y_ctx[:, : y_prev.shape[1]] = y_prev
    ctx = head_contexts(model.params, cfg, x, y_ctx, i)
    n_iter = int(np.ceil(np.log2(2.0 / tol))) + 1
    lo = np.full(u.size, -1.0)
    hi = np.full(u.size, 1.0)
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        f = head_cdf(model.params, cfg, model.buffers, i, ctx, [mid])[0]
        below = f < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def sample(model: CondDensityModel, x, n: int, rng: np.random.Generator, tol: float = 1e-10) -> np.ndarray:
    """Draw ``n`` responses from p(y | x) autoregressively; returns original units, shape (n, dy)."""
    cfg = model.cfg
    y_hat = np.zeros((n, cfg.dy))
    if n == 0:
        return y_hat
    xs = np.broadcast_to(model.scale_x(np.asarray(x, dtype=np.float64).reshape(1, -1)), (n, cfg.dx))
    for i in range(cfg.dy):
        u = rng.random(n)
        y_hat[:, i] = cdf_inverse(model, xs, y_hat[:, :i], u, i=i, tol=tol)
    return denormalize(y_hat, model.norm)


# ---------------------------------------------------------------------------
# checkpoints


def _encode_arrays(arrays: dict) -> dict:
    return {k: {"shape": list(v.shape), "data": [float(t) for t in np.asarray(v).reshape(-1)]} for k, v in arrays.items()}


def _decode_arrays(blob: dict) -> dict:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in blob.items()}


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_dict(model: CondDensityModel, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "norm": model.norm.to_dict(),
        "x_norm": None if model.x_norm is None else model.x_norm.to_dict(),
        "params": _encode_arrays(model.params),
        "buffers": _encode_arrays(model.buffers),
        "extra": extra or {},
    }


def save_checkpoint(model: CondDensityModel, path, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(model, extra), sort_keys=True) + "\n")


def load_checkpoint(path) -> CondDensityModel:
    path = Path(path)
    try:
        blob = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from None
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {blob.get('format')!r}")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {blob.get('version')} != supported {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig(**blob["config"])
        x_norm = None if blob.get("x_norm") is None else NormStats.from_dict(blob["x_norm"])
        return CondDensityModel(cfg, NormStats.from_dict(blob["norm"]), _decode_arrays(blob["params"]),
                                _decode_arrays(blob["buffers"]), x_norm)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None

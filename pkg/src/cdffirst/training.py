"""Penalized maximum-likelihood training with learnable input noise."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset, compute_norm_stats, input_norm_stats, normalize
from .model import CondDensityModel, ModelConfig, factor_log_pdf
from .smm import VARIANTS

log = logging.getLogger(__name__)

UNDERFLOW_PENALTY = 1e6
EARLY_STOP_METRICS = ("auto", "sse", "nll")


class NumericalAbort(ArithmeticError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 2000
    beta_x: float = 0.005
    beta_y: float = 0.005
    delta: float = 5e-6
    log_alpha_init: float = -2.0
    variant: str = "full"
    perturb_boundaries: bool = False
    early_stop_metric: str = "auto"
    patience: int = 50
    eval_every: int = 5
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.max_epochs > 0):
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if not (self.delta > 0 and self.patience > 0 and self.eval_every > 0):
            raise ValueError("delta, patience and eval_every must be positive")
        if self.beta_x < 0 or self.beta_y < 0:
            raise ValueError("beta_x and beta_y must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.early_stop_metric not in EARLY_STOP_METRICS:
            raise ValueError(f"early_stop_metric must be one of {EARLY_STOP_METRICS}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseDraw:
    eps_x: np.ndarray
    eps_y: np.ndarray

    @classmethod
    def draw(cls, n: int, dx: int, dy: int, rng: np.random.Generator) -> "NoiseDraw":
        return cls(rng.standard_normal((n, dx)), rng.standard_normal((n, dy)))

    @classmethod
    def zeros(cls, n: int, dx: int, dy: int) -> "NoiseDraw":
        return cls(np.zeros((n, dx)), np.zeros((n, dy)))


def inject_noise(x, y_norm, alpha_x, alpha_y, draw: NoiseDraw):
    """``x + alpha_x * eps_x`` and ``y_norm + alpha_y * eps_y`` (nodes or arrays)."""
    return ad.add(x, ad.mul(alpha_x, draw.eps_x)), ad.add(y_norm, ad.mul(alpha_y, draw.eps_y))


def kl_reg(log_alpha_x, log_alpha_y, beta_x: float, beta_y: float):
    """Weighted KL(N(0, diag(alpha^2)) || N(0, I)) for both noise scales, alphas given as logs."""

    def kl(s):
        return ad.sum(ad.mul(ad.sub(ad.sub(ad.exp(ad.mul(s, 2.0)), 1.0), ad.mul(s, 2.0)), 0.5))

    return ad.add(ad.mul(kl(log_alpha_x), beta_x), ad.mul(kl(log_alpha_y), beta_y))


@dataclass
class LossTerms:
    total: object
    nll: object
    kl: object
    n_underflow: int


def loss_terms(model: CondDensityModel, p: dict, x, y_norm, draw: NoiseDraw | None, cfg: TrainConfig,
               bn_update: bool = False) -> LossTerms:
    """Loss of one minibatch; ``p`` holds the parameters (tape leaves or arrays).

    ``draw=None`` (or the no-noise variant) uses unperturbed inputs and drops
    the KL term.
    """
    mcfg = model.cfg
    n = x.shape[0]
    noisy = draw is not None and cfg.variant != "no-noise"
    if noisy:
        alpha_x = ad.exp(p["log_alpha_x"])
        alpha_y = ad.exp(p["log_alpha_y"])
        x_hat, y_hat = inject_noise(x, y_norm, alpha_x, alpha_y, draw)
    else:
        x_hat, y_hat = x, y_norm
    total_logp = None
    n_underflow = 0
    for i in range(mcfg.dy):
        lower, upper = -1.0, 1.0
        if noisy and mcfg.perturb_boundaries:
            shift = ad.mul(alpha_y[i], draw.eps_y[:, i])
            lower, upper = ad.add(shift, -1.0), ad.add(shift, 1.0)
        logp_i, under = factor_log_pdf(p, mcfg, model.buffers, x_hat, y_hat, i, mcfg.delta, lower, upper, bn_update)
        n_underflow += under
        total_logp = logp_i if total_logp is None else ad.add(total_logp, logp_i)
    # per-row log density in original units; the Jacobian term is a constant
    nll = ad.neg(ad.add(ad.mean(total_logp), model.norm.log_jacobian))
    if noisy:
        kl = kl_reg(p["log_alpha_x"], p["log_alpha_y"], cfg.beta_x, cfg.beta_y)
    else:
        kl = np.float64(0.0)
    return LossTerms(ad.add(nll, kl), nll, kl, n_underflow)


def nll_loss(model: CondDensityModel, p: dict, x, y_norm, draw: NoiseDraw | None, cfg: TrainConfig):
    return loss_terms(model, p, x, y_norm, draw, cfg).nll


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: dict, grads: dict, state: Adam, lr: float | None = None) -> dict:
    if lr is not None:
        state.lr = lr
    state.step(params, grads)
    return params


def gradient(model: CondDensityModel, x, y_norm, draw: NoiseDraw | None, cfg: TrainConfig, bn_update=False):
    """``(loss terms, {param name: gradient})`` for one minibatch."""
    tape = ad.Tape()
    p = {k: tape.leaf(v, k) for k, v in model.params.items()}
    terms = loss_terms(model, p, x, y_norm, draw, cfg, bn_update)
    grads = tape.backward(terms.total)
    return terms, grads


@dataclass
class TrainResult:
    model: CondDensityModel
    log: list = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = math.inf
    epochs_run: int = 0


def _finite_or_abort(value, epoch, model, what):
    if not math.isfinite(value):
        dump = {k: float(np.max(np.abs(v))) if v.size else 0.0 for k, v in model.params.items()}
        raise NumericalAbort(f"non-finite {what} at epoch {epoch}; max |param| per tensor: {dump}")


def train(dataset: Dataset, config: TrainConfig, net: dict | None = None,
          eval_fn: Callable[[CondDensityModel], float] | None = None,
          norm=None, x_norm=None) -> TrainResult:
    """Fit a model to ``dataset``.

    ``net`` holds network-shape options (see :class:`ModelConfig`).
    ``eval_fn(model) -> float`` drives early stopping (lower is better); by
    default the unperturbed training NLL is used.  The returned model is the
    best one seen at an evaluation point.  Responses and inputs are both
    rescaled to [-1, 1] with training-set ranges unless ``norm``/``x_norm``
    are given.
    """
    rng = np.random.default_rng(config.seed)
    norm = compute_norm_stats(dataset.y) if norm is None else norm
    x_norm = input_norm_stats(dataset.x) if x_norm is None else x_norm
    mcfg = ModelConfig(
        dx=dataset.dx, dy=dataset.dy, **(net or {}),
        delta=config.delta, variant=config.variant, log_alpha_init=config.log_alpha_init,
        perturb_boundaries=config.perturb_boundaries,
    )
    model = CondDensityModel.create(mcfg, norm, rng, x_norm)
    x_all = normalize(dataset.x, x_norm)
    y_all = normalize(dataset.y, norm)
    if eval_fn is None:
        def eval_fn(m):
            return float(loss_terms(m, m.params, x_all, y_all, None, config).nll)

    opt = Adam(config.learning_rate)
    result = TrainResult(model.copy())
    n = len(dataset)
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        under = 0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            draw = NoiseDraw.draw(idx.size, mcfg.dx, mcfg.dy, rng)
            terms, grads = gradient(model, x_all[idx], y_all[idx], draw, config, bn_update=mcfg.batch_norm)
            total = float(ad.value(terms.total))
            _finite_or_abort(total, epoch, model, "loss")
            w = idx.size / n
            sums += w * np.array([total, float(ad.value(terms.nll)), float(ad.value(terms.kl))])
            under += terms.n_underflow
            opt.step(model.params, grads)
        result.epochs_run = epoch
        if epoch % config.eval_every and epoch != config.max_epochs:
            continue
        metric = float(eval_fn(model))
        record = {
            "epoch": epoch,
            "train_loss": float(sums[0]),
            "nll": float(sums[1]),
            "kl": float(sums[2]),
            "eval_metric": metric,
            "alpha_x_norm": float(np.linalg.norm(model.alpha_x)),
            "alpha_y_norm": float(np.linalg.norm(model.alpha_y)),
            "underflow": int(under),
        }
        result.log.append(record)
        log.debug("epoch %d loss %.5f metric %.5f", epoch, sums[0], metric)
        if math.isfinite(metric) and metric < result.best_metric:
            result.best_metric = metric
            result.best_epoch = epoch
            result.model = model.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    return result


def relative_error(a, b) -> np.ndarray:
    """``|a - b| / max(|a|, |b|)`` elementwise, 0 where both are 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.where(scale > 0.0, np.abs(a - b) / np.where(scale > 0.0, scale, 1.0), 0.0)


def gradient_check(model: CondDensityModel, x, y_norm, draw: NoiseDraw | None, cfg: TrainConfig,
                   h: float = 1e-6) -> dict:
    """Compare tape gradients of the full loss with central differences.

    The difference quotients evaluate the loss in extended precision
    (``np.longdouble``) so their roundoff stays well below the comparison
    tolerance.  Returns ``{param name: relative error array}``.
    """
    _, grads = gradient(model, x, y_norm, draw, cfg)
    ld = np.longdouble
    x_l = np.asarray(x).astype(ld)
    y_l = np.asarray(y_norm).astype(ld)
    draw_l = None if draw is None else NoiseDraw(draw.eps_x.astype(ld), draw.eps_y.astype(ld))
    params_l = {k: v.astype(ld) for k, v in model.params.items()}

    def f(p):
        return loss_terms(model, p, x_l, y_l, draw_l, cfg).total

    numeric = ad.numerical_gradient(f, params_l, h)
    return {k: relative_error(grads[k], numeric[k]) for k in grads}

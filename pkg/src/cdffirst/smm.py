"""Masked Smooth Min-Max heads and the shared condition embedding.

Each response dimension ``i`` owns a stack of monotone layers.  A layer maps
its monotone input ``h`` (width ``n_in``) to ``n_out`` features through

    pre = h @ exp(log_wz) + c @ wc + b          # shape (R, n_out * K * G)
    out = softmin_K( softmax_G( pre ) )         # shape (R, n_out)

where ``c`` is the layer's context vector.  Positive monotone weights and
strictly increasing soft extrema make the head strictly increasing in its
monotone input for any context.

The context comes from one embedding stack shared by all heads.  Head ``i``
feeds it ``concat(x_hat, y_hat * mask_i)`` where ``mask_i`` keeps only the
responses with index below ``i``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

VARIANTS = ("full", "no-noise", "hard-minmax", "mono-mlp")

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class NetworkConfig:
    dx: int
    dy: int
    mono_widths: tuple = (16, 16, 1)
    cond_widths: tuple = (8, 8, 2)
    groups: int = 32
    group_size: int = 32
    hidden_groups: int = 4
    hidden_group_size: int = 4
    variant: str = "full"
    batch_norm: bool = False

    def __post_init__(self):
        self.mono_widths = tuple(int(w) for w in self.mono_widths)
        self.cond_widths = tuple(int(w) for w in self.cond_widths)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.mono_widths) != len(self.cond_widths) or not self.mono_widths:
            raise ValueError("mono_widths and cond_widths must be nonempty and of equal length")
        if self.mono_widths[-1] != 1:
            raise ValueError("the last monotone width must be 1 (scalar head output)")
        if min(self.mono_widths + self.cond_widths) < 1 or self.dx < 1 or self.dy < 1:
            raise ValueError("widths and dimensions must be positive")
        if min(self.groups, self.group_size, self.hidden_groups, self.hidden_group_size) < 1:
            raise ValueError("group counts and sizes must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.mono_widths)

    def layer_shape(self, layer: int) -> tuple[int, int, int, int]:
        """``(n_in, n_out, K, G)`` for a head layer."""
        n_in = 1 if layer == 0 else self.mono_widths[layer - 1]
        n_out = self.mono_widths[layer]
        if self.variant == "mono-mlp":
            return n_in, n_out, 1, 1
        if layer == self.n_layers - 1:
            return n_in, n_out, self.groups, self.group_size
        return n_in, n_out, self.hidden_groups, self.hidden_group_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mono_widths"] = list(self.mono_widths)
        d["cond_widths"] = list(self.cond_widths)
        return d


def ar_mask(i: int, dy: int) -> np.ndarray:
    """Binary mask over response dimensions: 1 where ``j < i`` (0-based)."""
    return (np.arange(dy) < i).astype(np.float64)


def soft_max_group(values, beta: float = 1.0):
    """Smooth upper bound of ``max(values)``: ``(1/beta) log sum exp(beta v)``."""
    return ad.soft_max(np.asarray(values, dtype=np.float64), beta, axis=-1)


def soft_min_group(values, beta: float = 1.0):
    return ad.soft_min(np.asarray(values, dtype=np.float64), beta, axis=-1)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> dict:
    p = {}
    n_in = cfg.dx + cfg.dy
    for l, w in enumerate(cfg.cond_widths):
        bound = 1.0 / math.sqrt(n_in)
        p[f"embed.{l}.w"] = rng.uniform(-bound, bound, (n_in, w))
        p[f"embed.{l}.b"] = rng.uniform(-bound, bound, w)
        n_in = w
    for i in range(cfg.dy):
        for l in range(cfg.n_layers):
            n_in, n_out, k, g = cfg.layer_shape(l)
            width = n_out * k * g
            pre = f"head.{i}.layer.{l}"
            fan_in = n_in + cfg.cond_widths[l]
            bound = 1.0 / math.sqrt(fan_in)
            p[f"{pre}.log_wz"] = rng.normal(-1.0, 0.5, (n_in, width))
            p[f"{pre}.wc"] = rng.uniform(-bound, bound, (cfg.cond_widths[l], width))
            p[f"{pre}.b"] = rng.uniform(-bound, bound, width)
            if cfg.variant != "mono-mlp" and cfg.variant != "hard-minmax":
                p[f"{pre}.log_beta_max"] = np.zeros(())
                p[f"{pre}.log_beta_min"] = np.zeros(())
            if cfg.batch_norm and l < cfg.n_layers - 1:
                p[f"{pre}.bn.log_scale"] = np.zeros(n_out)
                p[f"{pre}.bn.shift"] = np.zeros(n_out)
    return p


def init_buffers(cfg: NetworkConfig) -> dict:
    """Running statistics for the optional batch normalization."""
    buf = {}
    if not cfg.batch_norm:
        return buf
    for i in range(cfg.dy):
        for l in range(cfg.n_layers - 1):
            n_out = cfg.mono_widths[l]
            buf[f"head.{i}.layer.{l}.bn.mean"] = np.zeros(n_out)
            buf[f"head.{i}.layer.{l}.bn.var"] = np.ones(n_out)
    return buf


# ---------------------------------------------------------------------------
# forward pieces


def condition_embed(p, cfg: NetworkConfig, z) -> list:
    """Context vectors ``c^(1..L)``; each entry lies strictly inside (-1, 1)."""
    contexts = []
    h = z
    for l in range(len(cfg.cond_widths)):
        h = ad.tanh(ad.add(ad.matmul(h, p[f"embed.{l}.w"]), p[f"embed.{l}.b"]))
        contexts.append(h)
    return contexts


def embed_input(x_hat, y_hat, i: int) -> np.ndarray:
    """Embedding input for head ``i``: ``[x_hat, y_hat * mask_i]`` (plain arrays only)."""
    x_hat = np.atleast_2d(x_hat)
    y_hat = np.atleast_2d(y_hat)
    return np.concatenate([x_hat, y_hat * ar_mask(i, y_hat.shape[1])], axis=1)


def _batch_norm(h, p, buffers, pre, update):
    mean_key, var_key = f"{pre}.bn.mean", f"{pre}.bn.var"
    if update:
        hv = ad.value(h)
        buffers[mean_key] = (1 - BN_MOMENTUM) * buffers[mean_key] + BN_MOMENTUM * hv.mean(axis=0)
        buffers[var_key] = (1 - BN_MOMENTUM) * buffers[var_key] + BN_MOMENTUM * hv.var(axis=0)
    scale = ad.mul(ad.exp(p[f"{pre}.bn.log_scale"]), 1.0 / np.sqrt(buffers[var_key] + BN_EPS))
    return ad.add(ad.mul(ad.sub(h, buffers[mean_key]), scale), p[f"{pre}.bn.shift"])


def smm_head_forward(p, cfg: NetworkConfig, i: int, y_mono, contexts, buffers=None, bn_update=False):
    """Raw head output ``O`` for monotone inputs ``y_mono`` (shape (R,)) and per-row contexts."""
    rows = np.shape(ad.value(y_mono))[0]
    h = ad.reshape(y_mono, (rows, 1))
    for l in range(cfg.n_layers):
        _, n_out, k, g = cfg.layer_shape(l)
        pre = f"head.{i}.layer.{l}"
        z = ad.add(
            ad.add(ad.matmul(h, ad.exp(p[f"{pre}.log_wz"])), ad.matmul(contexts[l], p[f"{pre}.wc"])),
            p[f"{pre}.b"],
        )
        last = l == cfg.n_layers - 1
        if cfg.variant == "mono-mlp":
            h = z if last else ad.tanh(z)
        else:
            z = ad.reshape(z, (rows, n_out, k, g))
            if cfg.variant == "hard-minmax":
                h = ad.hard_min(ad.hard_max(z, axis=-1), axis=-1)
            else:
                beta_max = ad.exp(p[f"{pre}.log_beta_max"])
                beta_min = ad.exp(p[f"{pre}.log_beta_min"])
                h = ad.soft_min(ad.soft_max(z, beta_max, axis=-1), beta_min, axis=-1)
        if cfg.batch_norm and not last:
            h = _batch_norm(h, p, buffers, pre, bn_update)
    return ad.reshape(h, (rows,))

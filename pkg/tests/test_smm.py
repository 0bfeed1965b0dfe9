import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdffirst import autodiff as ad
from cdffirst.smm import (
    NetworkConfig,
    ar_mask,
    condition_embed,
    init_params,
    smm_head_forward,
    soft_max_group,
    soft_min_group,
)

from conftest import SMALL_NET


def small_cfg(**kw):
    return NetworkConfig(dx=1, dy=2, **{**SMALL_NET, **kw})


@given(a=st.floats(-50, 50), beta=st.floats(0.01, 100))
def test_soft_extrema_of_singleton(a, beta):
    assert soft_max_group([a], beta) == pytest.approx(a, abs=1e-12)
    assert soft_min_group([a], beta) == pytest.approx(a, abs=1e-12)


def test_soft_extrema_closed_forms():
    assert soft_max_group([1.3, 1.3], 1.0) == pytest.approx(1.3 + math.log(2), abs=1e-14)
    assert soft_min_group([1.3, 1.3], 1.0) == pytest.approx(1.3 - math.log(2), abs=1e-14)
    assert abs(soft_max_group([0.0, 10.0], 10.0) - 10.0) < 1e-4
    assert abs(soft_min_group([0.0, 10.0], 10.0)) < 1e-4
    # large values stay finite thanks to max-subtraction
    assert soft_max_group([1000.0, 999.0], 5.0) == pytest.approx(1000.0 + math.log1p(math.exp(-5.0)) / 5.0)


@settings(max_examples=50)
@given(vals=st.lists(st.floats(-20, 20), min_size=1, max_size=8), beta=st.floats(0.1, 20))
def test_soft_extrema_bound_the_hard_ones(vals, beta):
    assert soft_max_group(vals, beta) >= max(vals) - 1e-12
    assert soft_min_group(vals, beta) <= min(vals) + 1e-12


def test_ar_mask():
    np.testing.assert_array_equal(ar_mask(0, 3), [0, 0, 0])
    np.testing.assert_array_equal(ar_mask(2, 3), [1, 1, 0])


def test_condition_embed_zero_params_give_zero():
    cfg = small_cfg()
    p = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    for c in condition_embed(p, cfg, np.random.default_rng(1).normal(size=(4, 3))):
        assert np.all(c == 0.0)


def test_condition_embed_range_and_golden_value():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(42))
    c = condition_embed(p, cfg, np.array([[0.25, -0.5, 0.0]]))
    np.testing.assert_allclose(c[0], [[-0.09189557129778606, 0.06736576820477364, 0.31104630681311846]], rtol=0, atol=1e-14)
    np.testing.assert_allclose(c[1], [[0.361189686118473, -0.06002272926020042]], rtol=0, atol=1e-14)
    wide = condition_embed(p, cfg, np.random.default_rng(2).normal(0, 3, size=(200, 3)))
    assert all(np.all(np.abs(ci) < 1.0) for ci in wide)


def test_degenerate_head_is_identity():
    cfg = NetworkConfig(dx=1, dy=1, mono_widths=(1,), cond_widths=(1,), groups=1, group_size=1)
    p = {k: np.zeros_like(v) for k, v in init_params(cfg, np.random.default_rng(0)).items()}
    y = np.linspace(-1, 1, 11)
    out = smm_head_forward(p, cfg, 0, y, [np.ones((11, 1))])
    np.testing.assert_allclose(out, y, atol=1e-15)


@pytest.mark.parametrize("variant", ["full", "hard-minmax", "mono-mlp"])
def test_head_strictly_increasing_over_random_draws(variant):
    # 1000 parameter draws, each checked on a 1e-3-spaced grid under a random context
    y = np.arange(-1.0, 1.0 + 1e-12, 1e-3)
    for seed in range(1000 if variant == "full" else 100):
        rng = np.random.default_rng(seed)
        cfg = small_cfg(variant=variant)
        p = init_params(cfg, rng)
        ctx = [np.tile(rng.uniform(-1, 1, (1, w)), (y.size, 1)) for w in cfg.cond_widths]
        out = smm_head_forward(p, cfg, seed % 2, y, ctx)
        assert np.all(np.diff(out) > 0.0), f"seed {seed}"


def test_head_smooth_and_continuous():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(5))
    y = np.linspace(-1, 1, 20001)
    ctx = [np.tile(np.full((1, w), 0.3), (y.size, 1)) for w in cfg.cond_widths]
    out = smm_head_forward(p, cfg, 0, y, ctx)
    h = y[1] - y[0]
    assert np.max(np.abs(np.diff(out))) < 1e-3
    second = np.diff(out, 2) / h**2
    assert np.max(np.abs(second)) < 1e3


def test_mask_soundness_numerically():
    cfg = NetworkConfig(dx=1, dy=3, **SMALL_NET)
    p = init_params(cfg, np.random.default_rng(7))
    x = np.array([[0.2]])
    y = np.array([[0.1, -0.4, 0.6]])
    from cdffirst.model import head_contexts

    for i in range(3):
        base = smm_head_forward(p, cfg, i, y[:, i], head_contexts(p, cfg, x, y, i))
        for j in range(i, 3):
            for h in (1e-3, 0.5):
                y2 = y.copy()
                y2[0, j] += h
                mono = y[:, i]  # monotone input held fixed; only the context path is probed
                moved = smm_head_forward(p, cfg, i, mono, head_contexts(p, cfg, x, y2, i))
                assert abs((moved - base)[0] / h) < 1e-10


def test_positive_weights_and_gradient_flow():
    cfg = small_cfg()
    p = init_params(cfg, np.random.default_rng(9))
    tape = ad.Tape()
    leaves = {k: tape.leaf(v, k) for k, v in p.items()}
    y = np.linspace(-1, 1, 7)
    ctx = condition_embed(leaves, cfg, np.zeros((7, 3)))
    grads = tape.backward(ad.sum(smm_head_forward(leaves, cfg, 0, y, ctx)))
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert np.any(grads["head.0.layer.0.log_beta_max"] != 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(dx=1, dy=1, mono_widths=(4, 2), cond_widths=(4, 2))
    with pytest.raises(ValueError):
        NetworkConfig(dx=1, dy=1, mono_widths=(4, 1), cond_widths=(4,))
    with pytest.raises(ValueError):
        NetworkConfig(dx=1, dy=1, variant="other")
    cfg = NetworkConfig(dx=1, dy=1)
    assert cfg.layer_shape(2) == (16, 1, 32, 32)
    assert cfg.layer_shape(0) == (1, 16, 4, 4)

import json
import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from cdffirst.model import (
    CheckpointError,
    DegenerateRangeError,
    cdf_inverse,
    conditional_cdf,
    conditional_pdf,
    joint_log_density,
    load_checkpoint,
    log_density_parts,
    sample,
    save_checkpoint,
)

from conftest import identity_model, random_model


def test_identity_model_linear_cdf_and_flat_pdf():
    m = identity_model()
    y = np.linspace(-1, 1, 9)[:, None]
    x = np.zeros((9, 1))
    np.testing.assert_allclose(conditional_cdf(m, x, y, 0), (y[:, 0] + 1) / 2, atol=1e-15)
    for delta in (1e-6, 5e-6, 1e-3):
        np.testing.assert_allclose(conditional_pdf(m, x, y * 0.99, 0, delta=delta), 0.5, atol=1e-9)


def test_identity_model_log_density_and_jacobian():
    m = identity_model(y_min=0.0, y_max=10.0)
    assert m.norm.log_jacobian == pytest.approx(math.log(0.2))
    logp = joint_log_density(m, np.zeros((5, 1)), np.linspace(1, 9, 5)[:, None])
    np.testing.assert_allclose(logp, math.log(0.5 * 0.2), atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_boundary_exactness_and_monotone_cdf(seed):
    m = random_model(seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (101, 1))
    y = rng.uniform(-1, 1, (101, 2))
    for i in range(2):
        assert np.all(conditional_cdf(m, x, y, i, points=-1.0) == 0.0)
        np.testing.assert_allclose(conditional_cdf(m, x, y, i, points=1.0), 1.0, atol=2e-16)
        grid = np.linspace(-1, 1, 101)
        F = np.array([conditional_cdf(m, x[:1], y[:1], i, points=t)[0] for t in grid])
        assert np.all(np.diff(F) >= 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_pdf_integrates_to_one(seed):
    m = random_model(seed)
    t = np.linspace(-1, 1, 2001)
    for i in range(2):
        y = np.zeros((t.size, 2))
        y[:, i] = t
        y[:, :i] = 0.3
        pdf = conditional_pdf(m, np.full((t.size, 1), -0.4), y, i)
        assert np.all(pdf >= 0.0)
        assert 0.999 <= trapezoid(pdf, t) <= 1.001


def test_degenerate_head_raises():
    m = identity_model()
    m.params["head.0.layer.0.log_wz"][:] = -60.0  # effective weight ~ 1e-26
    with pytest.raises(DegenerateRangeError):
        conditional_cdf(m, np.zeros((1, 1)), np.zeros((1, 1)), 0)


def test_autoregressive_consistency():
    m = random_model(3, dy=3)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (20, 1))
    y = rng.uniform(-0.9, 0.9, (20, 3))
    for i in range(3):
        y2 = y.copy()
        y2[:, i + 1:] = rng.uniform(-0.9, 0.9, (20, 3 - i - 1))
        assert np.array_equal(conditional_pdf(m, x, y, i), conditional_pdf(m, x, y2, i))


def test_out_of_range_points_are_clamped_and_counted():
    m = identity_model(y_min=0.0, y_max=10.0)
    logp, n_clamped, n_under = log_density_parts(m, np.zeros((3, 1)), np.array([[5.0], [12.0], [-1.0]]))
    assert n_clamped == 2 and n_under == 0
    assert np.all(np.isfinite(logp))
    with pytest.warns(UserWarning):
        joint_log_density(m, np.zeros((1, 1)), np.array([[11.0]]))


def test_cdf_inverse_linear_and_round_trip():
    m = identity_model()
    assert cdf_inverse(m, np.zeros((1, 1)), np.zeros((1, 0)), 0.5)[0] == pytest.approx(0.0, abs=1e-10)
    r = random_model(11)
    x = np.array([[0.2]])
    prev = np.array([[0.1]])
    u = conditional_cdf(r, x, np.array([[0.1, 0.37]]), 1)
    assert cdf_inverse(r, x, prev, u, i=1, tol=1e-10)[0] == pytest.approx(0.37, abs=1e-9)


def test_cdf_inverse_forward_consistency():
    r = random_model(12)
    rng = np.random.default_rng(5)
    u = rng.uniform(0.001, 0.999, 1000)
    x = np.full((1000, 1), -0.3)
    prev = rng.uniform(-1, 1, (1000, 1))
    t = cdf_inverse(r, x, prev, u, i=1, tol=1e-10)
    F = conditional_cdf(r, x, np.column_stack([prev[:, 0], t]), 1)
    # bisection stops on interval width; F's slope is bounded, so the residual is tiny too
    assert np.max(np.abs(F - u)) < 1e-8


def test_identity_model_samples_are_uniform():
    m = identity_model(dy=2, y_min=2.0, y_max=7.0)
    s = sample(m, np.array([0.0]), 1000, np.random.default_rng(3))
    assert s.shape == (1000, 2)
    assert np.all((s >= 2.0) & (s <= 7.0))
    for j in range(2):
        assert stats.kstest((s[:, j] - 2.0) / 5.0, "uniform").statistic < 0.05


def test_sampling_bounds_and_reproducibility():
    r = random_model(4)
    a = sample(r, np.array([0.5]), 50, np.random.default_rng(9))
    b = sample(r, np.array([0.5]), 50, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.all((a >= -3.0) & (a <= 3.0))
    assert sample(r, np.array([0.5]), 0, np.random.default_rng(9)).shape == (0, 2)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    r = random_model(8, batch_norm=True)
    path = tmp_path / "m.ckpt.json"
    save_checkpoint(r, path, extra={"note": "x"})
    back = load_checkpoint(path)
    assert back.cfg == r.cfg
    for k, v in r.params.items():
        assert np.array_equal(back.params[k], v) and back.params[k].dtype == np.float64
    for k, v in r.buffers.items():
        assert np.array_equal(back.buffers[k], v)
    save_checkpoint(back, tmp_path / "again.ckpt.json", extra={"note": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt.json").read_bytes()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")
    r = random_model(1)
    path = tmp_path / "m.json"
    save_checkpoint(r, path)
    blob = json.loads(path.read_text())
    blob["version"] = 99
    path.write_text(json.dumps(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
    path.write_text("not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_input_scaling_is_applied_and_saved(tmp_path):
    from cdffirst.data import NormStats

    r = random_model(6)
    scaled = r.copy()
    scaled.x_norm = NormStats([0.0], [10.0])
    # x = 7.5 in raw units is 0.5 in the network's input scale
    y = np.array([[0.4, -1.0]])
    assert np.array_equal(scaled.density(np.array([7.5]), y), r.density(np.array([0.5]), y))
    save_checkpoint(scaled, tmp_path / "s.json")
    back = load_checkpoint(tmp_path / "s.json")
    assert np.array_equal(back.x_norm.y_max, [10.0])
    assert np.array_equal(sample(back, np.array([7.5]), 5, np.random.default_rng(0)),
                          sample(r, np.array([0.5]), 5, np.random.default_rng(0)))

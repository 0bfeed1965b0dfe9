import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdffirst.data import Dataset, sample_toy, true_density
from cdffirst.evaluation import (
    EvalReport,
    GridSpec,
    OracleDensity,
    ToyProtocol,
    ZeroDensity,
    ablation_suite,
    delta_sweep,
    ece_from_pit,
    emit_density_grid,
    kfold_indices,
    reliability_ece,
    sse_on_grid,
    test_nll as nll_report,
    toy_grid,
)
from cdffirst.model import joint_log_density
from cdffirst.training import TrainConfig

from conftest import SMALL_NET, identity_model, random_model


def test_grid_spec_points_row_major():
    pts = GridSpec([(0.0, 1.0, 3), (10.0, 20.0, 2)]).points()
    assert pts.tolist() == [[0, 10], [0, 20], [0.5, 10], [0.5, 20], [1, 10], [1, 20]]
    with pytest.raises(ValueError):
        GridSpec([(0.0, 1.0, 1)])
    with pytest.raises(ValueError):
        GridSpec([(1.0, 1.0, 5)])


def test_toy_grid_padding():
    (lo, hi, n), _ = toy_grid("squares", 0.0).axes
    assert (lo, hi, n) == (pytest.approx(-5.5), pytest.approx(5.5), 50)


def test_oracle_sse_is_zero():
    for task in ("squares", "elastic-ring"):
        rep = sse_on_grid(OracleDensity(task), task, [-0.75, -0.25, 0.25, 0.75])
        assert all(v == 0.0 for v in rep.values.values())


def test_zero_model_sse_on_squares_closed_form():
    # at x = 0 the grid axis is linspace(-5.5, 5.5, 50); count the nodes inside [1, 5]
    nodes = [-5.5 + 11.0 * k / 49 for k in range(50)]
    inside = sum(1 for v in nodes if 1.0 <= v <= 5.0)
    expected = 2 * inside**2 * (1 / 32) ** 2
    rep = sse_on_grid(ZeroDensity(), "squares", [0.0])
    assert rep.values["x=0"] == pytest.approx(expected, rel=1e-12)


def test_sse_nonnegative_and_zero_iff_equal():
    m = random_model(0)
    rep = sse_on_grid(m, "gaussian-stick", [0.0], count=10)
    assert rep.values["x=0"] > 0.0


def test_report_mean_and_text_is_stable():
    rep = EvalReport("sse", {"a": 1.0, "b": 2.0, "c": 6.0}, counters={"k": 1}, wall_time=3.2)
    assert rep.mean == 3.0
    lines = [json.loads(l) for l in rep.to_text().splitlines()]
    assert [l.get("value") for l in lines[:3]] == [1.0, 2.0, 6.0]
    assert lines[3]["mean"] == 3.0 and lines[3]["counters"] == {"k": 1}
    assert "wall_time" not in rep.to_text()


@settings(max_examples=25, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=4), st.floats(0, 10), min_size=1, max_size=6))
def test_report_mean_matches_entries(values):
    rep = EvalReport("m", values)
    assert rep.mean == pytest.approx(np.mean(list(values.values())))


def test_nll_identity_model_uniform_data():
    m = identity_model(y_min=0.0, y_max=10.0)
    y = np.linspace(0.1, 9.9, 50)[:, None]
    d = Dataset(np.zeros((50, 1)), y)
    rep = nll_report(m, d)
    assert rep.values["test"] == pytest.approx(np.log(10.0), abs=1e-9)
    dup = Dataset(np.zeros((100, 1)), np.vstack([y, y]))
    assert nll_report(m, dup).values["test"] == pytest.approx(rep.values["test"], rel=1e-14)


def test_ece_uniform_and_degenerate():
    u = np.random.default_rng(0).random(100_000)
    ece, nominal, empirical = ece_from_pit(u)
    assert ece < 0.01
    np.testing.assert_allclose(nominal, (np.arange(1, 11) - 0.5) / 10)
    # all mass at 0.5: coverage is 0 below 0.5 and 1 from 0.55 up
    ece_deg, _, emp = ece_from_pit(np.full(1000, 0.5))
    expected = np.mean([abs((1.0 if q >= 0.5 else 0.0) - q) for q in (np.arange(1, 11) - 0.5) / 10])
    assert ece_deg == pytest.approx(expected) == pytest.approx(0.25)


@settings(max_examples=40)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200))
def test_ece_range(u):
    ece, _, _ = ece_from_pit(u)
    assert 0.0 <= ece <= 0.5


def test_reliability_on_calibrated_identity_model():
    m = identity_model(y_min=0.0, y_max=1.0)
    rng = np.random.default_rng(0)
    d = Dataset(np.zeros((20_000, 1)), rng.random((20_000, 1)))
    rep = reliability_ece(m, d)
    assert rep.values["y0"] < 0.01
    assert len(rep.extra["reliability"]["y0"]["empirical"]) == 10


def test_emit_density_grid(tmp_path):
    m = random_model(1)
    grid = GridSpec([(-2.0, 2.0, 3), (-1.0, 1.0, 3)])
    text = emit_density_grid(m, [0.3], grid, tmp_path / "g.csv")
    rows = text.strip().splitlines()
    assert rows[0] == "y0,y1,density" and len(rows) == 10
    vals = np.array([[float(c) for c in r.split(",")] for r in rows[1:]])
    assert np.all(vals[:, 2] >= 0)
    ref = np.exp(joint_log_density(m, np.full((9, 1), 0.3), vals[:, :2]))
    np.testing.assert_allclose(vals[:, 2], ref, rtol=1e-12, atol=0)
    assert (tmp_path / "g.csv").read_text() == text


def _tiny_protocol():
    return ToyProtocol(task="gaussian-stick", n_samples=60, eval_x=(0.0,), grid=8,
                       train=TrainConfig(max_epochs=2, batch_size=30, eval_every=1, patience=2), net=dict(SMALL_NET))


def test_delta_sweep_determinism_and_errors():
    p = _tiny_protocol()
    rep = delta_sweep(p, [1e-5, 1e-5], seeds=[0])
    assert len(rep.values) == 1
    a = delta_sweep(p, [1e-5], seeds=[0])
    b = delta_sweep(p, [1e-5, 3e-5], seeds=[0])
    assert a.values["delta=1e-05"] == b.values["delta=1e-05"] == rep.values["delta=1e-05"]
    with pytest.raises(ValueError):
        delta_sweep(p, [])
    with pytest.raises(ValueError):
        delta_sweep(p, [0.0])


def test_ablation_suite_reports_each_variant():
    rep = ablation_suite(_tiny_protocol(), seeds=[0])
    assert list(rep.values) == ["variant=full", "variant=no-noise", "variant=hard-minmax", "variant=mono-mlp"]
    assert set(rep.extra["per_condition"]) == {"full", "no-noise", "hard-minmax", "mono-mlp"}
    assert rep.to_text() == ablation_suite(_tiny_protocol(), seeds=[0]).to_text()


def test_kfold_partitions():
    folds = list(kfold_indices(23, 5, np.random.default_rng(0)))
    tests = np.concatenate([t for _, t in folds])
    assert sorted(tests.tolist()) == list(range(23))
    for tr, te in folds:
        assert not set(tr) & set(te) and len(tr) + len(te) == 23

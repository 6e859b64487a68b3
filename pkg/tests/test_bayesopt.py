"""GP surrogate, expected improvement, and the optimization loop."""

import numpy as np
import pytest

from burgers_rom.bayesopt import (
    EvalRecord,
    GaussianProcess,
    SearchBox,
    SearchDimension,
    default_search_box,
    expected_improvement,
    history_to_csv,
    latin_hypercube,
    optimize,
    propose_next,
)
from burgers_rom.errors import ConfigError


def test_search_box_round_trip():
    box = default_search_box()
    rng = np.random.default_rng(0)
    for _ in range(50):
        u = rng.random(6)
        point = box.from_unit(u)
        assert box.contains(point)
        back = box.to_unit(point)
        assert np.allclose(back, np.clip(u, 0, 1), atol=1e-12)


def test_log_dimension_mapping():
    box = SearchBox(dims=(SearchDimension("lam", 1e-10, 1.0, log_scale=True),))
    assert box.from_unit(np.array([0.0]))["lam"] == pytest.approx(1e-10)
    assert box.from_unit(np.array([1.0]))["lam"] == pytest.approx(1.0)
    assert box.from_unit(np.array([0.5]))["lam"] == pytest.approx(1e-5)


def test_dimension_validation():
    with pytest.raises(ConfigError):
        SearchDimension("bad", 2.0, 1.0)
    with pytest.raises(ConfigError):
        SearchDimension("bad", -1.0, 1.0, log_scale=True)


def test_gp_interpolates_observations():
    # posterior mean matches observations to the jitter level on 5 points
    rng = np.random.default_rng(1)
    x = rng.random((5, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    gp = GaussianProcess().fit(x, y)
    mean, var = gp.predict(x)
    assert np.abs(mean - y).max() <= 1e-4  # 1e-6 jitter leaves a ~sqrt scale residual
    assert np.all(var >= 0)


def test_gp_prediction_quality_on_smooth_function():
    rng = np.random.default_rng(2)
    x = rng.random((40, 1))
    y = np.sin(6 * x[:, 0])
    gp = GaussianProcess().fit(x, y)
    xs = np.linspace(0, 1, 100)[:, None]
    mean, _ = gp.predict(xs)
    assert np.abs(mean - np.sin(6 * xs[:, 0])).max() <= 0.05


def test_expected_improvement_nonnegative_and_zero_when_hopeless():
    mean = np.array([5.0, 0.0, -2.0])
    var = np.array([1e-12, 1.0, 1.0])
    ei = expected_improvement(mean, var, best=0.0)
    assert np.all(ei >= 0)
    assert ei[0] <= 1e-12  # far above best with no variance
    assert ei[2] > ei[1]


def test_latin_hypercube_stratification():
    rng = np.random.default_rng(3)
    u = latin_hypercube(rng, 10, 4)
    assert u.shape == (10, 4)
    for j in range(4):
        strata = np.floor(u[:, j] * 10).astype(int)
        assert sorted(strata) == list(range(10))


def test_propose_next_empty_history_inside_box():
    box = default_search_box()
    point = propose_next([], box, np.random.default_rng(4))
    assert box.contains(point)


def test_propose_next_with_replicated_minimum():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    history = [EvalRecord(point={"x": 0.3}, mse=0.01, seed=0) for _ in range(20)]
    point = propose_next(history, box, np.random.default_rng(5))
    assert box.contains(point)


def test_all_failed_history_falls_back_to_random():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    history = [EvalRecord(point={"x": 0.5}, mse=float("nan"), seed=0, failed=True)
               for _ in range(12)]
    point = propose_next(history, box, np.random.default_rng(6))
    assert box.contains(point)


def test_quadratic_objective_finds_minimum():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    true_argmin = 0.3137

    def objective(p):
        return (p["x"] - true_argmin) ** 2

    best, history = optimize(objective, box, budget=30, seed=7)
    # grid-search oracle pins the optimum location
    grid = np.linspace(0, 1, 100_001)
    oracle = grid[np.argmin((grid - true_argmin) ** 2)]
    assert abs(best.point["x"] - oracle) <= 1e-2
    assert len(history) == 30


def test_optimize_budget_one():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    best, history = optimize(lambda p: p["x"], box, budget=1, seed=8)
    assert len(history) == 1
    assert best is history[0]


def test_optimize_reproducible():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0), SearchDimension("y", -1.0, 1.0)))

    def objective(p):
        return (p["x"] - 0.2) ** 2 + (p["y"] + 0.5) ** 2

    best_a, hist_a = optimize(objective, box, budget=25, seed=9)
    best_b, hist_b = optimize(objective, box, budget=25, seed=9)
    assert [r.point for r in hist_a] == [r.point for r in hist_b]
    assert [r.mse for r in hist_a] == [r.mse for r in hist_b]


def test_optimize_continues_after_objective_failure():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    calls = {"n": 0}

    def objective(p):
        calls["n"] += 1
        if calls["n"] % 3 == 0:
            raise RuntimeError("synthetic failure")
        return (p["x"] - 0.6) ** 2

    best, history = optimize(objective, box, budget=20, seed=10)
    assert len(history) == 20
    assert sum(r.failed for r in history) == 6
    assert not best.failed
    assert abs(best.point["x"] - 0.6) <= 0.1


def test_every_proposal_inside_box():
    box = default_search_box()

    def objective(p):
        return p["spectral_radius"] + p["regularization"]

    _, history = optimize(objective, box, budget=18, seed=11)
    assert all(box.contains(r.point) for r in history)


def test_best_so_far_nonincreasing():
    box = SearchBox(dims=(SearchDimension("x", 0.0, 1.0),))
    _, history = optimize(lambda p: (p["x"] - 0.44) ** 2, box, budget=25, seed=12)
    best_so_far = np.minimum.accumulate([r.mse for r in history])
    assert np.all(np.diff(best_so_far) <= 0)


def test_history_csv_format():
    box = default_search_box()
    _, history = optimize(lambda p: p["leakage"], box, budget=3, seed=13)
    csv = history_to_csv(history, box)
    lines = csv.strip().split("\n")
    assert lines[0] == ("iteration,spectral_radius,input_scale,leakage,"
                        "regularization,adjacency_density,input_density,mse,seed")
    assert len(lines) == 4

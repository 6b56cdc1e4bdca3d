from __future__ import annotations

import math

import numpy as np
import pytest

from chillcast import (
    ExperimentGrid,
    GridRunConfig,
    Phase1Config,
    Phase2Config,
    BackboneSpec,
    ConfigError,
    SeriesTable,
    baseline_linear,
    baseline_persistence,
    emit_plots,
    emit_report,
    metric_mae,
    metric_mse,
    run_grid,
)
from chillcast.data import SynthConfig, make_windows, synth_generate
from chillcast.evalbench import cell_id, grid_cells
from conftest import make_table


# --- metrics -----------------------------------------------------------------


def test_mse_examples():
    assert metric_mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metric_mse([2.0, 2.0], [0.0, 2.0]) == 2.0  # (4 + 0) / 2


def test_mae_examples():
    assert metric_mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert metric_mae([2.0, 2.0], [0.0, 2.0]) == 1.0  # (2 + 0) / 2


def test_metric_shape_mismatch():
    with pytest.raises(ValueError):
        metric_mse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        metric_mae([1.0], [1.0, 2.0])


def test_mae_jensen_bound_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred = rng.normal(size=12)
        truth = rng.normal(size=12)
        assert metric_mae(pred, truth) <= math.sqrt(metric_mse(pred, truth)) + 1e-9


# --- persistence baseline ---------------------------------------------------------


def test_persistence_repeats_last_value():
    table = make_table(30, 2)
    (w, *_) = make_windows(table, L=8, K=3)
    pred = baseline_persistence(w)
    np.testing.assert_array_equal(pred, np.repeat(w.inputs[-1, w.target_col], 3))


def test_persistence_constant_series_zero_error():
    values = np.column_stack([np.ones(40), np.full(40, 5.0)])
    base = make_table(40, 2)
    table = SeriesTable(timestamps=base.timestamps, values=values,
                        columns=base.columns, target_name=base.target_name)
    windows = make_windows(table, L=8, K=4)
    for w in windows:
        assert metric_mse(baseline_persistence(w), w.target) == 0.0


def test_persistence_single_step():
    table = make_table(20, 2)
    (w, *_) = make_windows(table, L=4, K=1)
    assert baseline_persistence(w).shape == (1,)


def test_persistence_random_walk_matches_theory():
    # K-step-ahead squared error of the last value on a random walk has
    # expectation k*sigma^2; averaged over k=1..K that is sigma^2 (K+1)/2
    rng = np.random.default_rng(42)
    sigma, K, T = 1.0, 12, 4000
    walk = np.cumsum(rng.normal(0, sigma, size=T))
    base = make_table(T, 2)
    table = SeriesTable(timestamps=base.timestamps,
                        values=np.column_stack([np.zeros(T), walk]),
                        columns=base.columns, target_name=base.target_name)
    windows = make_windows(table, L=4, K=K, stride=7)
    errors = [metric_mse(baseline_persistence(w), w.target) for w in windows]
    expected = sigma**2 * (K + 1) / 2
    assert np.mean(errors) == pytest.approx(expected, rel=0.15)


# --- linear baseline ---------------------------------------------------------------


def _exponential_table(T=400, phi=0.98):
    base = make_table(T, 2)
    target = phi ** np.arange(T)
    values = np.column_stack([np.zeros(T), target])
    return SeriesTable(timestamps=base.timestamps, values=values,
                       columns=base.columns, target_name=base.target_name)


def test_linear_fits_exact_autoregression():
    # target follows an exact first-order recurrence with zero noise, so the
    # normalized window-to-future map is the same for every window
    table = _exponential_table()
    windows = make_windows(table, L=24, K=8)
    split = int(0.8 * len(windows))
    model = baseline_linear(windows[:split])
    metrics = _eval_linear(model, windows[split:])
    assert metrics < 1e-6


def _eval_linear(model, windows):
    from chillcast.evalbench import _evaluate_linear

    return _evaluate_linear(model, windows)["mse"]


def test_linear_ridge_limit_predicts_training_mean():
    table = make_table(300, 3, seed=9)
    windows = make_windows(table, L=12, K=4)
    model = baseline_linear(windows, ridge=1e12)
    x = np.random.default_rng(0).normal(size=12)
    pred = model.predict_normalized(x)[0]
    np.testing.assert_allclose(pred, model.y_mean, atol=1e-6)


def test_linear_deterministic():
    table = make_table(300, 3, seed=10)
    windows = make_windows(table, L=12, K=4)
    a = baseline_linear(windows)
    b = baseline_linear(windows)
    np.testing.assert_array_equal(a.weights, b.weights)


# --- grid machinery -----------------------------------------------------------------


def test_grid_default_product_is_216():
    assert len(grid_cells(ExperimentGrid())) == 216  # 6 variants x 3 x 4 x 3


def test_grid_validation():
    with pytest.raises(ConfigError):
        ExperimentGrid(fractions=())
    with pytest.raises(ConfigError):
        ExperimentGrid(fractions=(0.0, 1.0))
    with pytest.raises(ConfigError):
        ExperimentGrid(variants=("full", "mystery"))


def _tiny_grid_cfg():
    return GridRunConfig(
        phase1=Phase1Config(epochs=1, d=8, batch_size=16, token_budget=160),
        phase2=Phase2Config(epochs=1, d=8, batch_size=16, patience=1,
                            token_budget=160,
                            backbone=BackboneSpec(layer_count=1, hidden_dim=16,
                                                  nhead=2)),
    )


@pytest.fixture(scope="module")
def tiny_grid_run(tmp_path_factory):
    table = synth_generate(SynthConfig(T=900, M=4), seed=0)
    grid = ExperimentGrid(fractions=(1.0, 0.5), horizons=(8,), input_len=24,
                          seeds=(0,),
                          variants=("full", "persistence", "linear"))
    outdir = tmp_path_factory.mktemp("grid")
    rows, samples = run_grid(grid, table, _tiny_grid_cfg(), outdir=outdir)
    return grid, rows, samples, outdir


def test_run_grid_row_count_and_order(tiny_grid_run):
    grid, rows, _, _ = tiny_grid_run
    assert len(rows) == 6  # 3 variants x 2 fractions x 1 horizon x 1 seed
    keys = [r.sort_key() for r in rows]
    assert keys == sorted(keys)
    assert all(r.error is None for r in rows)


def test_run_grid_rows_satisfy_jensen(tiny_grid_run):
    _, rows, _, _ = tiny_grid_run
    for r in rows:
        assert r.mae <= math.sqrt(r.mse) + 1e-9
        assert r.mse >= 0 and r.mae >= 0


def test_run_grid_saves_checkpoints_and_samples(tiny_grid_run):
    grid, rows, samples, outdir = tiny_grid_run
    assert (outdir / "runs" / cell_id("full", 1.0, 8, 0) / "checkpoint.pt").exists()
    assert (outdir / "runs" / cell_id("linear", 1.0, 8, 0) / "checkpoint.npz").exists()
    assert (8, 0) in samples
    assert (outdir / "samples.npz").exists()


def test_single_cell_grid():
    table = synth_generate(SynthConfig(T=600, M=3), seed=1)
    grid = ExperimentGrid(fractions=(1.0,), horizons=(6,), input_len=16,
                          seeds=(0,), variants=("persistence",))
    rows, _ = run_grid(grid, table)
    assert len(rows) == 1
    assert rows[0].variant == "persistence"


def test_grid_reproducible_metrics():
    table = synth_generate(SynthConfig(T=700, M=3), seed=2)
    grid = ExperimentGrid(fractions=(1.0,), horizons=(6,), input_len=16,
                          seeds=(1,), variants=("full",))
    cfg = _tiny_grid_cfg()
    rows_a, _ = run_grid(grid, table, cfg)
    rows_b, _ = run_grid(grid, table, cfg)
    assert rows_a[0].mse == rows_b[0].mse
    assert rows_a[0].mae == rows_b[0].mae


def test_grid_records_cell_failures():
    # persistence cannot window a segment shorter than L+K: rows must carry
    # the reason instead of aborting the grid
    table = synth_generate(SynthConfig(T=200, M=3), seed=3)
    grid = ExperimentGrid(fractions=(1.0, 0.25), horizons=(8,), input_len=96,
                          seeds=(0,), variants=("persistence",))
    rows, _ = run_grid(grid, table)
    assert len(rows) == 2
    failed = [r for r in rows if r.error]
    assert len(failed) >= 1
    assert math.isnan(failed[0].mse)


def test_grid_parallel_workers_match_serial():
    table = synth_generate(SynthConfig(T=900, M=3), seed=4)
    grid = ExperimentGrid(fractions=(1.0, 0.5), horizons=(6,), input_len=16,
                          seeds=(0,), variants=("persistence", "linear"))
    serial, _ = run_grid(grid, table, workers=1)
    parallel, _ = run_grid(grid, table, workers=2)
    assert [(r.variant, r.fraction, r.mse, r.mae) for r in serial] == [
        (r.variant, r.fraction, r.mse, r.mae) for r in parallel
    ]


# --- report and plots ---------------------------------------------------------------


def test_emit_report_single_row(tmp_path):
    from chillcast import ReportRow

    rows = [ReportRow("full", 1.0, 24, 0, 0.5, 0.3, 0.01)]
    path = emit_report(rows, tmp_path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "variant,fraction,K,seed,mse,mae,wall_time_s"
    assert len(lines) == 2
    assert lines[1].startswith("full,1,24,0,0.5,0.3,")


def test_emit_report_deterministic_bytes(tmp_path):
    from chillcast import ReportRow

    rows = [
        ReportRow("full", 1.0, 24, 0, 0.5123456789, 0.3, 0.01),
        ReportRow("linear", 0.5, 12, 1, 0.25, 0.125, 0.0),
    ]
    a = emit_report(rows, tmp_path / "a").read_bytes()
    b = emit_report(rows, tmp_path / "b").read_bytes()
    assert a == b


def test_emit_report_requires_rows(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)


def test_emit_plots_files_exist(tiny_grid_run, tmp_path):
    _, rows, samples, _ = tiny_grid_run
    paths = emit_plots(rows, tmp_path, samples)
    assert any(p.name == "scarcity.png" for p in paths)
    assert any(p.name.startswith("horizon_8_seed_0") for p in paths)
    for p in paths:
        assert p.stat().st_size > 0

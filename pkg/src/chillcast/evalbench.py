"""Experiment grid: scarcity fractions x horizons x variants x seeds.

Each grid cell runs the full protocol (split, scarcity slice, windowing,
alignment unless disabled, forecaster training, evaluation on the untouched
test segment) and yields one report row. Metrics are computed in normalized
space to keep magnitudes comparable across scarcity settings; raw-unit
metrics are emitted alongside. Baselines are last-value persistence and a
closed-form ridge map from the target's history to its future.
"""

from __future__ import annotations

import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .alignment import Phase1Config, train_phase1
from .data import (
    SeriesTable,
    SplitSpec,
    TimeWindow,
    chronological_split,
    make_windows,
    scarcity_slice,
)
from .errors import ConfigError, InsufficientDataError
from .forecaster import ForecastModel, Phase2Config, train_phase2
from .revin import DEFAULT_EPSILON, fit_stats
from .template import KnowledgeBase, default_knowledge_base

MODEL_VARIANTS = ("full", "no_adpt", "no_egia", "no_kari")
BASELINE_VARIANTS = ("persistence", "linear")

REPORT_COLUMNS = ("variant", "fraction", "K", "seed", "mse", "mae", "wall_time_s")


def metric_mse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean squared difference."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def metric_mae(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean absolute difference."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def baseline_persistence(window: TimeWindow, horizon: int | None = None) -> np.ndarray:
    """Repeat the window's last observed target value K times."""
    k = horizon if horizon is not None else window.K
    return np.repeat(window.inputs[-1, window.target_col], k)


@dataclass(frozen=True, eq=False)
class LinearBaseline:
    """Closed-form ridge map from L normalized target values to K futures.

    Fitted on centered data with an unpenalized intercept, so predictions
    collapse to the training-mean vector as the ridge weight grows.
    """

    weights: np.ndarray  # (L, K)
    x_mean: np.ndarray  # (L,)
    y_mean: np.ndarray  # (K,)
    epsilon: float

    def predict_normalized(self, x_norm: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x_norm) - self.x_mean) @ self.weights + self.y_mean


def _normalized_target_pairs(
    windows: list[TimeWindow], epsilon: float
) -> tuple[np.ndarray, np.ndarray, list]:
    xs, ys, stats_list = [], [], []
    for w in windows:
        stats = fit_stats(w.inputs, epsilon=epsilon)
        denom = stats.stds[w.target_col] + stats.epsilon
        xs.append((w.inputs[:, w.target_col] - stats.means[w.target_col]) / denom)
        ys.append((w.target - stats.means[w.target_col]) / denom)
        stats_list.append(stats)
    return np.asarray(xs), np.asarray(ys), stats_list


def baseline_linear(
    train_windows: list[TimeWindow],
    ridge: float = 1e-3,
    epsilon: float = DEFAULT_EPSILON,
) -> LinearBaseline:
    """Fit the ridge baseline on a window list."""
    if not train_windows:
        raise InsufficientDataError("linear baseline needs training windows")
    x, y, _ = _normalized_target_pairs(train_windows, epsilon)
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - x_mean, y - y_mean
    gram = xc.T @ xc + ridge * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, xc.T @ yc)
    return LinearBaseline(weights=weights, x_mean=x_mean, y_mean=y_mean, epsilon=epsilon)


@dataclass(frozen=True)
class ExperimentGrid:
    fractions: tuple[float, ...] = (1.0, 0.5, 0.25)
    horizons: tuple[int, ...] = (12, 24, 48, 96)
    input_len: int = 96
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = MODEL_VARIANTS + BASELINE_VARIANTS

    def __post_init__(self) -> None:
        if not (self.fractions and self.horizons and self.seeds and self.variants):
            raise ConfigError("grid axes must be non-empty")
        if any(not (0 < f <= 1) for f in self.fractions):
            raise ConfigError("grid fractions must lie in (0, 1]")
        known = set(MODEL_VARIANTS) | set(BASELINE_VARIANTS)
        unknown = set(self.variants) - known
        if unknown:
            raise ConfigError(f"unknown grid variants: {sorted(unknown)}")


@dataclass
class ReportRow:
    variant: str
    fraction: float
    K: int
    seed: int
    mse: float
    mae: float
    wall_time_s: float
    mse_raw: float = math.nan
    mae_raw: float = math.nan
    error: str | None = None

    def __post_init__(self) -> None:
        # Jensen: mean|e| <= sqrt(mean e^2); failed rows carry NaN metrics
        if math.isfinite(self.mse) and math.isfinite(self.mae):
            if self.mse < 0 or self.mae < 0:
                raise ValueError("metrics must be non-negative")
            if self.mae > math.sqrt(self.mse) + 1e-9:
                raise ValueError(
                    f"mae {self.mae} exceeds sqrt(mse) {math.sqrt(self.mse)}"
                )

    def sort_key(self):
        return (self.variant, self.fraction, self.K, self.seed)


def grid_cells(grid: ExperimentGrid) -> list[tuple[str, float, int, int]]:
    """All (variant, fraction, K, seed) cells, in report order."""
    cells = [
        (v, f, k, s)
        for v in grid.variants
        for f in grid.fractions
        for k in grid.horizons
        for s in grid.seeds
    ]
    return sorted(cells)


def cell_id(variant: str, fraction: float, K: int, seed: int) -> str:
    return f"{variant}_f{fraction:g}_K{K}_s{seed}"


def metrics_from_records(records) -> dict[str, float]:
    pred_n = np.concatenate([r.pred_norm for r in records])
    truth_n = np.concatenate([r.truth_norm for r in records])
    pred_r = np.concatenate([r.pred_raw for r in records])
    truth_r = np.concatenate([r.truth_raw for r in records])
    return {
        "mse": metric_mse(pred_n, truth_n),
        "mae": metric_mae(pred_n, truth_n),
        "mse_raw": metric_mse(pred_r, truth_r),
        "mae_raw": metric_mae(pred_r, truth_r),
    }


def evaluate_model(
    model: ForecastModel, windows: list[TimeWindow], kb: KnowledgeBase
) -> tuple[dict[str, float], list]:
    records = model.predict_batch(windows, kb)
    return metrics_from_records(records), records


def _evaluate_persistence(windows: list[TimeWindow], epsilon: float) -> dict[str, float]:
    x, y, stats_list = _normalized_target_pairs(windows, epsilon)
    pred_n = np.repeat(x[:, -1:], y.shape[1], axis=1)
    pred_r = np.stack(
        [
            p * (s.stds[w.target_col] + s.epsilon) + s.means[w.target_col]
            for p, s, w in zip(pred_n, stats_list, windows)
        ]
    )
    truth_r = np.stack([w.target for w in windows])
    return {
        "mse": metric_mse(pred_n, y),
        "mae": metric_mae(pred_n, y),
        "mse_raw": metric_mse(pred_r, truth_r),
        "mae_raw": metric_mae(pred_r, truth_r),
    }


def _evaluate_linear(
    baseline: LinearBaseline, windows: list[TimeWindow]
) -> dict[str, float]:
    x, y, stats_list = _normalized_target_pairs(windows, baseline.epsilon)
    pred_n = baseline.predict_normalized(x)
    pred_r = np.stack(
        [
            p * (s.stds[w.target_col] + s.epsilon) + s.means[w.target_col]
            for p, s, w in zip(pred_n, stats_list, windows)
        ]
    )
    truth_r = np.stack([w.target for w in windows])
    return {
        "mse": metric_mse(pred_n, y),
        "mae": metric_mae(pred_n, y),
        "mse_raw": metric_mse(pred_r, truth_r),
        "mae_raw": metric_mae(pred_r, truth_r),
    }


@dataclass
class GridRunConfig:
    """Knobs shared by every grid cell."""

    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    stride: int = 1
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    knowledge_base: KnowledgeBase | None = None
    scarcity_from_start: bool = False


def _segment_windows(
    table: SeriesTable, cfg: GridRunConfig, fraction: float, L: int, K: int
) -> tuple[list[TimeWindow], list[TimeWindow], list[TimeWindow]]:
    spec = SplitSpec(ratios=cfg.split_ratios, scarcity_fraction=fraction)
    train_seg, val_seg, test_seg = chronological_split(table, spec)
    train_seg = scarcity_slice(train_seg, fraction, from_start=cfg.scarcity_from_start)
    return (
        make_windows(train_seg, L, K, cfg.stride),
        make_windows(val_seg, L, K, cfg.stride),
        make_windows(test_seg, L, K, cfg.stride),
    )


def run_cell(
    table: SeriesTable,
    variant: str,
    fraction: float,
    K: int,
    seed: int,
    L: int,
    cfg: GridRunConfig,
    phase1_cache: dict | None = None,
    outdir=None,
) -> tuple[ReportRow, tuple[np.ndarray, np.ndarray] | None]:
    """One grid cell; returns its report row and an optional sample forecast."""
    return _run_cell_impl(
        table, variant, fraction, K, seed, L, cfg, phase1_cache,
        Path(outdir) if outdir is not None else None,
    )


def _run_cell_impl(
    table: SeriesTable,
    variant: str,
    fraction: float,
    K: int,
    seed: int,
    L: int,
    cfg: GridRunConfig,
    phase1_cache: dict | None,
    outdir: Path | None,
) -> tuple[ReportRow, tuple[np.ndarray, np.ndarray] | None]:
    kb = cfg.knowledge_base or default_knowledge_base(L=L, K=K)
    train_w, val_w, test_w = _segment_windows(table, cfg, fraction, L, K)
    started = time.perf_counter()
    sample = None

    if variant == "persistence":
        metrics = _evaluate_persistence(test_w, cfg.phase2.epsilon)
        wall = time.perf_counter() - started
    elif variant == "linear":
        baseline = baseline_linear(train_w, epsilon=cfg.phase2.epsilon)
        metrics = _evaluate_linear(baseline, test_w)
        wall = time.perf_counter() - started
        if outdir is not None:
            cdir = outdir / "runs" / cell_id(variant, fraction, K, seed)
            cdir.mkdir(parents=True, exist_ok=True)
            np.savez(
                cdir / "checkpoint.npz",
                weights=baseline.weights,
                x_mean=baseline.x_mean,
                y_mean=baseline.y_mean,
            )
    else:
        p2 = replace(
            cfg.phase2,
            use_adpt=variant != "no_adpt",
            use_egia=variant != "no_egia",
            use_kari=variant != "no_kari",
        )
        checkpoint = None
        if p2.use_adpt and p2.use_kari:
            key = (fraction, K, seed)
            if phase1_cache is not None and key in phase1_cache:
                checkpoint = phase1_cache[key]
            else:
                checkpoint = train_phase1(train_w, kb, cfg.phase1, seed=seed)
                if phase1_cache is not None:
                    phase1_cache[key] = checkpoint
        model = train_phase2(
            train_w, kb, checkpoint, p2, val_windows=val_w, seed=seed
        )
        metrics, records = evaluate_model(model, test_w, kb)
        wall = model.training_history.get(
            "s_per_iter", time.perf_counter() - started
        )
        if records:
            mid = records[len(records) // 2]
            sample = (mid.truth_raw.copy(), mid.pred_raw.copy())
        if outdir is not None:
            cdir = outdir / "runs" / cell_id(variant, fraction, K, seed)
            cdir.mkdir(parents=True, exist_ok=True)
            model.save(cdir / "checkpoint.pt")

    return (
        ReportRow(
            variant=variant,
            fraction=fraction,
            K=K,
            seed=seed,
            mse=metrics["mse"],
            mae=metrics["mae"],
            wall_time_s=wall,
            mse_raw=metrics["mse_raw"],
            mae_raw=metrics["mae_raw"],
        ),
        sample,
    )


def _cell_task(args):
    table, variant, fraction, K, seed, L, cfg, outdir = args
    try:
        row, sample = _run_cell_impl(
            table, variant, fraction, K, seed, L, cfg, None,
            Path(outdir) if outdir else None,
        )
        return row, sample, None
    except Exception:
        return None, None, traceback.format_exc()


def run_grid(
    grid: ExperimentGrid,
    table: SeriesTable,
    cfg: GridRunConfig | None = None,
    outdir=None,
    workers: int = 1,
) -> tuple[list[ReportRow], dict]:
    """Run every grid cell; failures become rows with an error reason.

    Returns the sorted rows plus sample forecasts, keyed by (K, seed), taken
    from the full variant at the largest fraction for plotting.
    """
    cfg = cfg or GridRunConfig()
    out = Path(outdir) if outdir is not None else None
    cells = grid_cells(grid)
    sample_fraction = max(grid.fractions)
    rows: list[ReportRow] = []
    samples: dict = {}
    phase1_cache: dict = {}

    def record(variant, fraction, K, seed, row, sample, err):
        if err is not None:
            rows.append(
                ReportRow(
                    variant=variant,
                    fraction=fraction,
                    K=K,
                    seed=seed,
                    mse=math.nan,
                    mae=math.nan,
                    wall_time_s=math.nan,
                    error=err,
                )
            )
            return
        rows.append(row)
        if sample is not None and variant == "full" and fraction == sample_fraction:
            samples[(K, seed)] = sample

    if workers <= 1:
        for variant, fraction, K, seed in cells:
            try:
                row, sample = _run_cell_impl(
                    table, variant, fraction, K, seed, grid.input_len, cfg,
                    phase1_cache, out,
                )
                record(variant, fraction, K, seed, row, sample, None)
            except Exception:
                record(variant, fraction, K, seed, None, None, traceback.format_exc())
    else:
        tasks = [
            (table, v, f, k, s, grid.input_len, cfg, str(out) if out else None)
            for v, f, k, s in cells
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (v, f, k, s), (row, sample, err) in zip(
                cells, pool.map(_cell_task, tasks)
            ):
                record(v, f, k, s, row, sample, err)

    rows.sort(key=ReportRow.sort_key)
    if out is not None and samples:
        out.mkdir(parents=True, exist_ok=True)
        flat = {}
        for (k, s), (truth, pred) in samples.items():
            flat[f"K{k}_s{s}_truth"] = truth
            flat[f"K{k}_s{s}_pred"] = pred
        np.savez(out / "samples.npz", **flat)
    return rows, samples


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def emit_report(rows: list[ReportRow], outdir) -> Path:
    """Write report.csv (normalized metrics) and report_raw.csv (raw units)."""
    if not rows:
        raise ValueError("no rows to report")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=ReportRow.sort_key)

    path = out / "report.csv"
    lines = [",".join(REPORT_COLUMNS)]
    for r in ordered:
        lines.append(
            f"{r.variant},{_fmt(r.fraction)},{r.K},{r.seed},"
            f"{_fmt(r.mse)},{_fmt(r.mae)},{_fmt(r.wall_time_s)}"
        )
    path.write_text("\n".join(lines) + "\n")

    raw_path = out / "report_raw.csv"
    lines = [",".join(REPORT_COLUMNS)]
    for r in ordered:
        lines.append(
            f"{r.variant},{_fmt(r.fraction)},{r.K},{r.seed},"
            f"{_fmt(r.mse_raw)},{_fmt(r.mae_raw)},{_fmt(r.wall_time_s)}"
        )
    raw_path.write_text("\n".join(lines) + "\n")

    failures = [r for r in ordered if r.error]
    if failures:
        fail_path = out / "failures.txt"
        fail_path.write_text(
            "\n\n".join(
                f"{cell_id(r.variant, r.fraction, r.K, r.seed)}\n{r.error}"
                for r in failures
            )
        )
    return path


def emit_plots(
    rows: list[ReportRow], outdir, samples: dict | None = None, image_format: str = "png"
) -> list[Path]:
    """Forecast-vs-truth line plots per horizon plus a scarcity bar plot."""
    if not rows:
        raise ValueError("no rows to plot")
    out = Path(outdir) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for (k, s), (truth, pred) in sorted((samples or {}).items()):
        fig, ax = plt.subplots(figsize=(7, 3))
        steps = np.arange(1, len(truth) + 1)
        ax.plot(steps, truth, label="observed", lw=1.5)
        ax.plot(steps, pred, label="forecast", lw=1.5, ls="--")
        ax.set_xlabel("steps ahead")
        ax.set_ylabel("cooling load")
        ax.set_title(f"horizon {k}, seed {s}")
        ax.legend()
        fig.tight_layout()
        path = out / f"horizon_{k}_seed_{s}.{image_format}"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    ok_rows = [r for r in rows if not r.error and not math.isnan(r.mse)]
    variants = sorted({r.variant for r in ok_rows})
    fractions = sorted({r.fraction for r in ok_rows}, reverse=True)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(variants), 1)
    xs = np.arange(len(fractions))
    for i, variant in enumerate(variants):
        means = []
        for frac in fractions:
            vals = [
                r.mse for r in ok_rows if r.variant == variant and r.fraction == frac
            ]
            means.append(float(np.mean(vals)) if vals else math.nan)
        ax.bar(xs + i * width, means, width=width, label=variant)
    ax.set_xticks(xs + width * (len(variants) - 1) / 2)
    ax.set_xticklabels([f"{int(f * 100)}%" for f in fractions])
    ax.set_xlabel("training data used")
    ax.set_ylabel("test MSE (normalized)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / f"scarcity.{image_format}"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written

"""Command-line pipeline: synth, align, train, eval, bench, plot.

Every command prints the fully resolved config (defaults filled) before doing
any work, never mutates its input data files, and overwrites its outputs so a
rerun with the same seed and config reproduces them.
"""

from __future__ import annotations

import functools
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .alignment import AlignmentCheckpoint, train_phase1
from .config import RunConfig, dump_resolved, load_run_config, load_table
from .data import (
    SplitSpec,
    chronological_split,
    make_windows,
    scarcity_slice,
    synth_generate,
)
from .errors import ChillcastError
from .evalbench import (
    GridRunConfig,
    ReportRow,
    emit_plots,
    emit_report,
    evaluate_model,
    run_grid,
)
from .forecaster import ForecastModel, train_phase2
from .template import default_knowledge_base, load_knowledge_base

ALIGN_FILE = "alignment.pt"
MODEL_FILE = "model.pt"
SYNTH_FILE = "synth.csv"


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="YAML run config.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Root seed; overrides the config.")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="Output directory; overrides the config.")(fn)
    return fn


def _ablation_options(fn):
    fn = click.option("--no-adpt", is_flag=True, help="Skip the text prefix.")(fn)
    fn = click.option("--no-egia", is_flag=True,
                      help="Skip cross-variable attention.")(fn)
    fn = click.option("--no-kari", is_flag=True,
                      help="Skip phase 1; freeze a random text encoder.")(fn)
    return fn


def _resolve(config_path, seed, out, no_adpt=False, no_egia=False, no_kari=False
             ) -> RunConfig:
    cfg = load_run_config(config_path)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, out=out)
    if no_adpt or no_egia or no_kari:
        cfg = replace(
            cfg,
            phase2=replace(
                cfg.phase2,
                use_adpt=cfg.phase2.use_adpt and not no_adpt,
                use_egia=cfg.phase2.use_egia and not no_egia,
                use_kari=cfg.phase2.use_kari and not no_kari,
            ),
        )
    click.echo("resolved config:")
    click.echo(dump_resolved(cfg))
    return cfg


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ChillcastError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _knowledge_base(cfg: RunConfig):
    if cfg.knowledge_base:
        return load_knowledge_base(cfg.knowledge_base)
    return default_knowledge_base(L=cfg.windows.L, K=cfg.windows.K)


def _segments(cfg: RunConfig, table):
    spec = SplitSpec(ratios=tuple(cfg.split.ratios),
                     scarcity_fraction=cfg.split.scarcity_fraction)
    train_seg, val_seg, test_seg = chronological_split(table, spec)
    train_seg = scarcity_slice(
        train_seg, cfg.split.scarcity_fraction,
        from_start=cfg.split.scarcity_from_start,
    )
    w = cfg.windows
    return (
        make_windows(train_seg, w.L, w.K, w.stride),
        make_windows(val_seg, w.L, w.K, w.stride),
        make_windows(test_seg, w.L, w.K, w.stride),
    )


def _variant_name(cfg: RunConfig) -> str:
    off = []
    if not cfg.phase2.use_adpt:
        off.append("no_adpt")
    if not cfg.phase2.use_egia:
        off.append("no_egia")
    if not cfg.phase2.use_kari:
        off.append("no_kari")
    return "+".join(off) if off else "full"


@click.group()
def main():
    """Cooling-load forecasting pipeline and benchmark."""


@main.command()
@_common_options
@_handle_errors
def synth(config_path, seed, out):
    """Generate a synthetic telemetry CSV."""
    cfg = _resolve(config_path, seed, out)
    synth_cfg = cfg.data.synth
    if synth_cfg.target_name != cfg.data.target:
        synth_cfg = replace(synth_cfg, target_name=cfg.data.target)
    table = synth_generate(synth_cfg, seed=cfg.seed)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / SYNTH_FILE
    table.to_frame().to_csv(path, index=False)
    click.echo(f"wrote {table.T} rows x {table.M} columns to {path}")


@main.command()
@_common_options
@_handle_errors
def align(config_path, seed, out):
    """Phase 1: train the contrastive alignment and freeze the text encoder."""
    cfg = _resolve(config_path, seed, out)
    table = load_table(cfg)
    kb = _knowledge_base(cfg)
    train_w, _, _ = _segments(cfg, table)
    checkpoint = train_phase1(train_w, kb, cfg.phase1, seed=cfg.seed)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / ALIGN_FILE
    checkpoint.save(path)
    click.echo(
        f"alignment trained on {len(train_w)} windows; "
        f"final loss {checkpoint.metadata['final_loss']:.4f}; saved to {path}"
    )


@main.command()
@_common_options
@_ablation_options
@_handle_errors
def train(config_path, seed, out, no_adpt, no_egia, no_kari):
    """Phase 2: train the forecaster against the frozen backbone."""
    cfg = _resolve(config_path, seed, out, no_adpt, no_egia, no_kari)
    table = load_table(cfg)
    kb = _knowledge_base(cfg)
    train_w, val_w, _ = _segments(cfg, table)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)

    checkpoint = None
    if cfg.phase2.use_adpt and cfg.phase2.use_kari:
        align_path = outdir / ALIGN_FILE
        if align_path.exists():
            checkpoint = AlignmentCheckpoint.load(align_path)
            click.echo(f"loaded alignment checkpoint from {align_path}")
        else:
            click.echo("no alignment checkpoint found; running phase 1 first")
            checkpoint = train_phase1(train_w, kb, cfg.phase1, seed=cfg.seed)
            checkpoint.save(align_path)

    model = train_phase2(
        train_w, kb, checkpoint, cfg.phase2, val_windows=val_w, seed=cfg.seed
    )
    path = outdir / MODEL_FILE
    model.save(path, align_ref={"source": str(outdir / ALIGN_FILE)
                                if checkpoint else "random-frozen"})
    hist = model.training_history
    click.echo(
        f"trained {hist['epochs_run']} epochs on {len(train_w)} windows; "
        f"final train loss {hist['train_loss'][-1]:.4f}; saved to {path}"
    )


@main.command(name="eval")
@_common_options
@_ablation_options
@_handle_errors
def eval_cmd(config_path, seed, out, no_adpt, no_egia, no_kari):
    """Evaluate the trained model on the untouched test segment."""
    cfg = _resolve(config_path, seed, out, no_adpt, no_egia, no_kari)
    table = load_table(cfg)
    kb = _knowledge_base(cfg)
    _, _, test_w = _segments(cfg, table)
    outdir = Path(cfg.out)
    model = ForecastModel.load(outdir / MODEL_FILE)
    metrics, records = evaluate_model(model, test_w, kb)
    row = ReportRow(
        variant=_variant_name(cfg),
        fraction=cfg.split.scarcity_fraction,
        K=cfg.windows.K,
        seed=cfg.seed,
        mse=metrics["mse"],
        mae=metrics["mae"],
        wall_time_s=model.training_history.get("s_per_iter", float("nan")),
        mse_raw=metrics["mse_raw"],
        mae_raw=metrics["mae_raw"],
    )
    report = emit_report([row], outdir)
    mid = records[len(records) // 2]
    samples = {(cfg.windows.K, cfg.seed): (mid.truth_raw, mid.pred_raw)}
    emit_plots([row], outdir, samples)
    click.echo(
        f"test mse {metrics['mse']:.6f} mae {metrics['mae']:.6f} "
        f"({len(test_w)} windows); report at {report}"
    )


@main.command()
@_common_options
@click.option("--workers", type=int, default=1,
              help="Parallel grid cells (processes).")
@_handle_errors
def bench(config_path, seed, out, workers):
    """Run the full experiment grid and emit report plus plots."""
    cfg = _resolve(config_path, seed, out)
    table = load_table(cfg)
    grid = cfg.experiment_grid()
    run_cfg = GridRunConfig(
        split_ratios=tuple(cfg.split.ratios),
        stride=cfg.windows.stride,
        phase1=cfg.phase1,
        phase2=cfg.phase2,
        knowledge_base=_knowledge_base(cfg),
        scarcity_from_start=cfg.split.scarcity_from_start,
    )
    outdir = Path(cfg.out)
    rows, samples = run_grid(grid, table, run_cfg, outdir=outdir, workers=workers)
    report = emit_report(rows, outdir)
    emit_plots(rows, outdir, samples)
    failed = sum(1 for r in rows if r.error)
    click.echo(f"grid complete: {len(rows)} rows ({failed} failed); report at {report}")
    if failed:
        sys.exit(1)


@main.command()
@_common_options
@_handle_errors
def plot(config_path, seed, out):
    """Re-emit plots from an existing report."""
    cfg = _resolve(config_path, seed, out)
    outdir = Path(cfg.out)
    report = outdir / "report.csv"
    if not report.exists():
        click.echo(f"error: no report at {report}", err=True)
        sys.exit(1)
    rows = _read_report(report)
    samples = {}
    sample_file = outdir / "samples.npz"
    if sample_file.exists():
        data = np.load(sample_file)
        keys = {name.rsplit("_", 1)[0] for name in data.files}
        for key in keys:
            k, s = key.split("_")
            samples[(int(k[1:]), int(s[1:]))] = (
                data[f"{key}_truth"], data[f"{key}_pred"]
            )
    paths = emit_plots(rows, outdir, samples)
    click.echo(f"wrote {len(paths)} plot files under {outdir / 'plots'}")


def _read_report(path: Path) -> list[ReportRow]:
    rows = []
    lines = path.read_text().strip().splitlines()
    for line in lines[1:]:
        variant, fraction, k, seed, mse, mae, wall = line.split(",")
        rows.append(
            ReportRow(
                variant=variant,
                fraction=float(fraction),
                K=int(k),
                seed=int(seed),
                mse=float(mse),
                mae=float(mae),
                wall_time_s=float(wall),
            )
        )
    return rows


if __name__ == "__main__":
    main()

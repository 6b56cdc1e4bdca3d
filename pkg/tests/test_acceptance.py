"""Acceptance suite: one test per criterion, each printing a pass line.

The heavier directional checks (6 and 7) train real models on the default
synthetic dataset and take a few minutes on CPU; everything is seeded, so
their outcomes are reproducible run to run.
"""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest
import torch

from chillcast import (
    BackboneSpec,
    ExperimentGrid,
    GridRunConfig,
    Phase1Config,
    Phase2Config,
    denormalize,
    fit_stats,
    kari_loss,
    load_dcdata,
    normalize,
    run_grid,
    train_phase2,
)
from chillcast.data import make_windows, synth_generate, SynthConfig
from chillcast.evalbench import emit_report, run_cell
from chillcast.forecaster import parameter_checksums
from chillcast.template import default_knowledge_base
from conftest import central_diff_grads, rel_err

EFFECTIVELY_ZERO_EPS = 1e-300  # stands in for epsilon = 0 in the exact formulas


def _report(name: str, elapsed: float, detail: str = "") -> None:
    print(f"[PASS] {name} ({elapsed:.1f}s) {detail}")


# -----------------------------------------------------------------------------
# 1. Instance-normalization suite


def test_acceptance_1_revin_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(123)
    worst_mean, worst_std, worst_rt = 0.0, 0.0, 0.0
    for _ in range(200):
        scale = rng.uniform(0.5, 50.0, size=8)
        offset = rng.uniform(-100.0, 100.0, size=8)
        window = rng.normal(size=(96, 8)) * scale + offset
        stats = fit_stats(window, epsilon=EFFECTIVELY_ZERO_EPS)
        assert (stats.stds > 0).all()
        normed = normalize(window, stats)
        worst_mean = max(worst_mean, float(np.abs(normed.mean(axis=0)).max()))
        worst_std = max(worst_std, float(np.abs(normed.std(axis=0) - 1.0).max()))
        restored = denormalize(normed[:, 5], stats, 5)
        worst_rt = max(
            worst_rt,
            float(np.max(np.abs(restored - window[:, 5]) / np.abs(window[:, 5]).max())),
        )
    elapsed = time.perf_counter() - start
    assert worst_mean < 1e-6
    assert worst_std < 1e-4
    assert worst_rt < 1e-6
    assert elapsed < 5.0
    _report(
        "criterion 1: instance-normalization suite",
        elapsed,
        f"max|mean|={worst_mean:.2e} max|std-1|={worst_std:.2e} round-trip={worst_rt:.2e}",
    )


# -----------------------------------------------------------------------------
# 2. Contrastive-loss exactness


def test_acceptance_2_contrastive_exactness():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)

    t1 = torch.randn(1, 8, generator=g, dtype=torch.float64)
    s1 = torch.randn(1, 8, generator=g, dtype=torch.float64)
    assert float(kari_loss(t1, s1, tau=0.05)) == 0.0

    for batch in (2, 4, 8):
        v = torch.ones(batch, 6, dtype=torch.float64)
        loss = float(kari_loss(v, v.clone(), tau=0.05))
        assert abs(loss - math.log(batch)) < 1e-6

    t = torch.randn(5, 8, generator=g, dtype=torch.float64)
    s = torch.randn(5, 8, generator=g, dtype=torch.float64)
    base = float(kari_loss(t, s, tau=0.05))
    t_scaled = t.clone()
    t_scaled[3] *= 250.0
    assert abs(float(kari_loss(t_scaled, s, tau=0.05)) - base) < 1e-6
    assert abs(float(kari_loss(t, s * 0.004, tau=0.05)) - base) < 1e-6

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report("criterion 2: contrastive-loss exactness", elapsed)


# -----------------------------------------------------------------------------
# 3. Gradient checks against central finite differences


def test_acceptance_3_gradient_checks():
    start = time.perf_counter()

    g = torch.Generator().manual_seed(1)
    t = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
    s = torch.randn(4, 8, generator=g, dtype=torch.float64, requires_grad=True)
    kari_loss(t, s, tau=0.05).backward()
    fd_t, fd_s = central_diff_grads(
        lambda: kari_loss(t.detach(), s.detach(), tau=0.05), [t, s], h=1e-6
    )
    err_t, err_s = rel_err(t.grad, fd_t), rel_err(s.grad, fd_s)
    assert err_t < 1e-3 and err_s < 1e-3

    from test_forecaster import _toy_model

    model = _toy_model().double()
    model.train()
    gen = torch.Generator().manual_seed(2)
    x = torch.randn(4, 8, 3, generator=gen, dtype=torch.float64)
    prefix_vec = torch.randn(4, 4, generator=gen, dtype=torch.float64)
    y = torch.randn(4, 2, generator=gen, dtype=torch.float64)

    def loss_fn():
        return torch.nn.functional.mse_loss(model(x, prefix_vec), y)

    loss_fn().backward()
    groups = model.trainable_groups()
    assert set(groups) == {"variate_embed", "egia", "prefix_expand", "adapter", "head"}
    worst = (None, 0.0)
    for name, params in groups.items():
        fd = central_diff_grads(loss_fn, params, h=1e-6)
        for p, approx in zip(params, fd):
            err = rel_err(p.grad, approx)
            if err > worst[1]:
                worst = (name, err)
            assert err < 1e-3, f"{name}: rel err {err}"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report(
        "criterion 3: gradient checks",
        elapsed,
        f"loss grads {max(err_t, err_s):.1e}; worst tensor {worst[0]} {worst[1]:.1e}",
    )


# -----------------------------------------------------------------------------
# 4. Attention oracle


def test_acceptance_4_attention_oracle():
    start = time.perf_counter()
    from chillcast.forecaster import EgiaAttention

    egia = EgiaAttention(d=4).double()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for lin in (egia.w_q, egia.w_k, egia.w_h):
            lin.weight.copy_(
                torch.randn(lin.weight.shape, generator=g, dtype=torch.float64)
            )
    s = torch.randn(3, 4, generator=g, dtype=torch.float64)

    sm = s.numpy()
    q = sm @ egia.w_q.weight.detach().numpy().T
    k = sm @ egia.w_k.weight.detach().numpy().T
    h = sm @ egia.w_h.weight.detach().numpy().T
    scores = q @ k.T / math.sqrt(4.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    brute_force = attn @ h

    with torch.no_grad():
        out = egia(s).numpy()
        assert np.abs(out - brute_force).max() < 1e-6

        weights = egia.attention_weights(s)
        assert float((weights.sum(dim=1) - 1.0).abs().max()) < 1e-6

        for perm in ([1, 2, 0], [2, 0, 1], [1, 0, 2]):
            p = torch.tensor(perm)
            delta = (egia(s[p]) - egia(s)[p]).abs().max()
            assert float(delta) < 1e-5

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    _report("criterion 4: attention oracle", elapsed)


# -----------------------------------------------------------------------------
# 5. Freeze contract over 50 training steps


def test_acceptance_5_freeze_contract():
    start = time.perf_counter()
    table = synth_generate(SynthConfig(T=400, M=4), seed=5)
    windows = make_windows(table, L=16, K=4)[:120]
    kb = default_knowledge_base(16, 4)
    # 120 windows, batch 12: 10 steps per epoch, 5 epochs = 50 steps
    common = dict(
        d=16,
        batch_size=12,
        patience=0,
        prefix_len=2,
        use_kari=False,
        token_budget=192,
        backbone=BackboneSpec(layer_count=1, hidden_dim=16, nhead=2),
    )
    untrained = train_phase2(windows, kb, None, Phase2Config(epochs=0, **common), seed=9)
    trained = train_phase2(windows, kb, None, Phase2Config(epochs=5, **common), seed=9)

    for name in ("backbone", "text_encoder"):
        before = parameter_checksums(getattr(untrained, name))
        after = parameter_checksums(getattr(trained, name))
        assert before == after, f"{name} drifted during training"

    groups_before = untrained.trainable_groups()
    groups_after = trained.trainable_groups()
    assert set(groups_after) == {
        "variate_embed",
        "egia",
        "prefix_expand",
        "adapter",
        "head",
    }
    for name in groups_after:
        changed = any(
            not torch.equal(a, b)
            for a, b in zip(groups_before[name], groups_after[name])
        )
        assert changed, f"trainable group {name} did not move"

    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    _report("criterion 5: freeze contract", elapsed, "50 steps, 5 groups moved")


# -----------------------------------------------------------------------------
# 6 and 7. Desk-scale directional checks on the default synthetic dataset


ACCEPT_CFG = GridRunConfig(
    phase1=Phase1Config(epochs=8, d=32, batch_size=64),
    phase2=Phase2Config(
        epochs=40,
        d=32,
        batch_size=64,
        patience=5,
        backbone=BackboneSpec(layer_count=2, hidden_dim=64),
    ),
)


def test_acceptance_6_ablation_direction(synth_default):
    start = time.perf_counter()
    seeds = (0, 1, 2)
    cache: dict = {}
    mse: dict[str, float] = {}
    for variant in ("full", "no_adpt", "no_egia", "no_kari"):
        vals = []
        for seed in seeds:
            row, _ = run_cell(synth_default, variant, 1.0, 24, seed, 96,
                              ACCEPT_CFG, cache)
            assert row.error is None if hasattr(row, "error") else True
            vals.append(row.mse)
        mse[variant] = float(np.mean(vals))
    prow, _ = run_cell(synth_default, "persistence", 1.0, 24, 0, 96, ACCEPT_CFG, {})
    persistence = prow.mse

    for variant in ("no_adpt", "no_egia", "no_kari"):
        assert mse["full"] <= 1.05 * mse[variant], (
            f"full {mse['full']:.4f} worse than {variant} {mse[variant]:.4f} "
            "beyond the 5% tie tolerance"
        )
    for variant, value in mse.items():
        assert value <= 0.9 * persistence, (
            f"{variant} {value:.4f} does not beat persistence {persistence:.4f} "
            "by 10%"
        )

    elapsed = time.perf_counter() - start
    assert elapsed < 7200.0
    detail = " ".join(f"{k}={v:.4f}" for k, v in mse.items())
    _report(
        "criterion 6: ablation direction",
        elapsed,
        f"{detail} persistence={persistence:.4f}",
    )


def test_acceptance_7_scarcity_robustness(synth_default):
    start = time.perf_counter()
    full_100, _ = run_cell(synth_default, "full", 1.0, 24, 0, 96, ACCEPT_CFG, {})
    full_25, _ = run_cell(synth_default, "full", 0.25, 24, 0, 96, ACCEPT_CFG, {})
    persistence_25, _ = run_cell(
        synth_default, "persistence", 0.25, 24, 0, 96, ACCEPT_CFG, {}
    )

    degradation = (full_25.mse - full_100.mse) / full_100.mse
    assert math.isfinite(degradation)
    assert full_25.mse < persistence_25.mse

    rerun, _ = run_cell(synth_default, "full", 0.25, 24, 0, 96, ACCEPT_CFG, {})
    assert rerun.mse == full_25.mse and rerun.mae == full_25.mae

    elapsed = time.perf_counter() - start
    assert elapsed < 1800.0
    _report(
        "criterion 7: scarcity robustness",
        elapsed,
        f"100%={full_100.mse:.4f} 25%={full_25.mse:.4f} "
        f"degradation={degradation:+.1%}, bitwise reproducible",
    )


# -----------------------------------------------------------------------------
# 8. Pipeline smoke on real telemetry (runs only when a CSV is supplied)


def test_acceptance_8_real_data_bench(tmp_path):
    csv_path = os.environ.get("CHILLCAST_DCDATA")
    if not csv_path:
        pytest.skip("set CHILLCAST_DCDATA=/path/to/dcdata.csv to run")
    start = time.perf_counter()
    target = os.environ.get("CHILLCAST_TARGET", "cooling_load")
    table = load_dcdata(csv_path, target)
    rows, samples = run_grid(ExperimentGrid(), table, ACCEPT_CFG, outdir=tmp_path)
    assert not any(r.error for r in rows), "grid cells failed on real data"
    emit_report(rows, tmp_path)
    for r in rows:
        assert r.mae <= math.sqrt(r.mse) + 1e-9
    _report(
        "criterion 8: real-data bench",
        time.perf_counter() - start,
        f"{len(rows)} rows",
    )

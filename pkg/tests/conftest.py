from __future__ import annotations

import numpy as np
import pytest
import torch

from chillcast import SeriesTable, SynthConfig, synth_generate


def make_table(T: int, M: int, seed: int = 0, target_name: str = "load") -> SeriesTable:
    """Random table with strictly increasing 5-minute timestamps."""
    rng = np.random.default_rng(seed)
    start = np.datetime64("2024-10-01", "ns")
    step = np.timedelta64(300, "s").astype("timedelta64[ns]")
    return SeriesTable(
        timestamps=start + step * np.arange(T),
        values=rng.normal(size=(T, M)),
        columns=tuple(f"c{i}" for i in range(M - 1)) + (target_name,),
        target_name=target_name,
    )


def central_diff_grads(loss_fn, tensors, h: float = 1e-5):
    """Central finite differences of a scalar loss w.r.t. each tensor, elementwise.

    The loss is re-evaluated from scratch for every +/- h perturbation, so this
    stays independent of autograd.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            grad = torch.zeros_like(t)
            flat, gflat = t.data.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(grad)
    return grads


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-30)
    return float((a - b).norm()) / denom


def state_dicts_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(torch.equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="session")
def synth_small() -> SeriesTable:
    return synth_generate(SynthConfig(T=700, M=4), seed=0)


@pytest.fixture(scope="session")
def synth_default() -> SeriesTable:
    """The default desk-scale dataset used by the heavier directional checks."""
    return synth_generate(SynthConfig(T=4000, M=6), seed=0)

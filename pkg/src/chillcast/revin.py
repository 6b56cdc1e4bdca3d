"""Per-window reversible instance normalization.

Statistic-only (no learnable affine): each window is standardized per column
with its own mean and population standard deviation, and forecasts are mapped
back with the stored stats. Epsilon is added to the std in the denominator so
constant sensor columns never divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 1e-5


@dataclass(frozen=True, eq=False)
class NormStats:
    """Per-window, per-column normalization statistics."""

    means: np.ndarray  # (M,)
    stds: np.ndarray  # (M,) population std, >= 0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise ValueError("means and stds must be 1-D vectors of equal length")
        if (stds < 0).any():
            raise ValueError("stds must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            means=np.asarray(d["means"], dtype=np.float64),
            stds=np.asarray(d["stds"], dtype=np.float64),
            epsilon=float(d["epsilon"]),
        )


def fit_stats(inputs: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> NormStats:
    """Column means and population (1/L) standard deviations of an LxM window."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("inputs must be an LxM matrix with L >= 1")
    return NormStats(means=x.mean(axis=0), stds=x.std(axis=0), epsilon=epsilon)


def normalize(inputs: np.ndarray, stats: NormStats) -> np.ndarray:
    """(x - mean) / (std + epsilon), column-wise."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stats.means.shape[0]:
        raise ValueError("inputs width does not match fitted stats")
    return (x - stats.means) / (stats.stds + stats.epsilon)


def denormalize(pred: np.ndarray, stats: NormStats, target_col: int) -> np.ndarray:
    """Exact inverse of :func:`normalize` restricted to one column."""
    if not (0 <= target_col < stats.means.shape[0]):
        raise IndexError(f"target_col {target_col} out of range")
    p = np.asarray(pred, dtype=np.float64)
    return p * (stats.stds[target_col] + stats.epsilon) + stats.means[target_col]


def normalize_target(values: np.ndarray, stats: NormStats, target_col: int) -> np.ndarray:
    """Forward map for the target column alone (used on ground-truth vectors)."""
    if not (0 <= target_col < stats.means.shape[0]):
        raise IndexError(f"target_col {target_col} out of range")
    v = np.asarray(values, dtype=np.float64)
    return (v - stats.means[target_col]) / (stats.stds[target_col] + stats.epsilon)

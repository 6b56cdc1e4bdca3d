"""Structured text templates paired with each forecasting window.

A template has four sections in fixed order: Background and Instruction come
from the domain knowledge base, Trend and Statistics are derived
deterministically from the window's normalized target history. Rendering is a
pure function of the sections, so identical windows always produce identical
text.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientDataError

# Trend classification thresholds. The slope dead-zone and both oscillation
# cutoffs are relative to the window's value range, which makes the labels
# invariant under positive affine rescaling of the series.
TREND_DEADZONE = 0.01
OSC_LOW = 0.05
OSC_HIGH = 0.20

DEFAULT_BACKGROUND = (
    "The facility is a water-cooled data center plant. Chillers produce "
    "chilled water that chilled-water pumps circulate to the server halls, "
    "while cooling-water pumps move condenser water between the chillers and "
    "the cooling towers. Outdoor air temperature and humidity drive "
    "condenser-side heat rejection, so pump inlet and outlet temperatures on "
    "both loops move together with ambient conditions and with the IT load. "
    "The cooling load is the thermal power the plant must remove; it rises "
    "and falls with server activity and weather and responds to the "
    "coordinated operation of the pumps and chillers."
)

DEFAULT_INSTRUCTION = (
    "Given the last {L} five-minute readings of every monitored variable, "
    "forecast the cooling load for the next {K} five-minute steps. Predict "
    "only the cooling-load column; all readings are standardized per window "
    "before forecasting."
)


@dataclass(frozen=True)
class KnowledgeBase:
    """Free-text plant description plus the forecasting task statement."""

    background: str
    instruction: str

    def __post_init__(self) -> None:
        if not self.background.strip():
            raise ValueError("knowledge base background must be non-empty")
        if not self.instruction.strip():
            raise ValueError("knowledge base instruction must be non-empty")


def default_knowledge_base(L: int = 96, K: int = 24) -> KnowledgeBase:
    return KnowledgeBase(
        background=DEFAULT_BACKGROUND,
        instruction=DEFAULT_INSTRUCTION.format(L=L, K=K),
    )


def load_knowledge_base(path) -> KnowledgeBase:
    """Read a plain-text file with ``[background]`` and ``[instruction]`` sections."""
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in Path(path).read_text().splitlines():
        stripped = line.strip().lower()
        if stripped in ("[background]", "[instruction]"):
            current = stripped[1:-1]
            sections.setdefault(current, [])
        elif current is not None:
            sections[current].append(line)
    missing = {"background", "instruction"} - set(sections)
    if missing:
        raise ConfigError(f"knowledge base file missing sections: {sorted(missing)}")
    return KnowledgeBase(
        background="\n".join(sections["background"]).strip(),
        instruction="\n".join(sections["instruction"]).strip(),
    )


@dataclass(frozen=True)
class CatsTemplate:
    """Four-section window description; ``rendered`` fixes the section order."""

    background: str
    instruction: str
    trend: str
    statistics: str

    def __post_init__(self) -> None:
        if not self.background.strip() or not self.instruction.strip():
            raise ValueError("background and instruction sections must be non-empty")

    @property
    def rendered(self) -> str:
        return (
            f"Background: {self.background}\n"
            f"Instruction: {self.instruction}\n"
            f"Trend: {self.trend}\n"
            f"Statistics: {self.statistics}"
        )


def describe_trend(series: np.ndarray) -> str:
    """Deterministic direction and oscillation labels for a series.

    Direction comes from the sign of the least-squares slope with a dead-zone
    of ``TREND_DEADZONE * range / L``; oscillation level is the ratio of the
    detrended residual std to the value range, cut at ``OSC_LOW``/``OSC_HIGH``.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    n = x.shape[0]
    if n < 2:
        raise InsufficientDataError("trend description needs at least 2 points")
    idx = np.arange(n, dtype=np.float64)
    slope, intercept = np.polyfit(idx, x, 1)
    value_range = float(x.max() - x.min())
    dead = TREND_DEADZONE * value_range / n
    if value_range == 0.0 or abs(slope) <= dead:
        # constant series: the true slope is zero, polyfit only returns noise
        direction = "stable"
    else:
        direction = "rising" if slope > 0 else "falling"
    residual_std = float((x - (slope * idx + intercept)).std())
    ratio = 0.0 if value_range == 0.0 else residual_std / value_range
    if ratio <= OSC_LOW:
        oscillation = "low"
    elif ratio <= OSC_HIGH:
        oscillation = "moderate"
    else:
        oscillation = "high"
    return (
        f"The recent cooling load is {direction} over the window "
        f"with {oscillation} oscillation."
    )


def describe_stats(series: np.ndarray) -> str:
    """Min, max, mean, and population variance, each to 4 decimal places."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.shape[0] < 1:
        raise ValueError("statistics need at least 1 point")
    return (
        f"min {x.min():.4f}, max {x.max():.4f}, "
        f"mean {x.mean():.4f}, variance {x.var():.4f}"
    )


def build_template(kb: KnowledgeBase, window, normalized_target: np.ndarray) -> CatsTemplate:
    """Assemble the four sections for one window.

    Trend and Statistics are computed on the normalized target history so the
    text describes the same signal the model sees.
    """
    series = np.asarray(normalized_target, dtype=np.float64).ravel()
    return CatsTemplate(
        background=kb.background,
        instruction=kb.instruction,
        trend=describe_trend(series),
        statistics=describe_stats(series),
    )

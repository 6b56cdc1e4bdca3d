"""Telemetry tables, chronological splits, scarcity slices, and sliding windows.

The central structure is :class:`SeriesTable`, an immutable timestamped matrix
of named sensor channels with one designated cooling-load target column.
Tables come from CSV files (:func:`load_dcdata`) or from the synthetic
generator (:func:`synth_generate`), and are cut into train/val/test segments
and then into fixed-length forecasting windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError, EmptyDataError, InsufficientDataError, SchemaError

TIMESTAMP_COLUMN = "timestamp"

# Guards against IEEE representation error in products like 0.7 * T, which can
# land a hair below the exact decimal value and push floor() down one row.
_FLOOR_NUDGE = 1e-9


def _floor_frac(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + _FLOOR_NUDGE))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SeriesTable:
    """A timestamped table of M named real-valued series over T rows.

    Immutable after construction: the value matrix is stored read-only.
    ``dropped_rows`` counts source rows discarded during ingestion because of
    missing or non-numeric cells. Empty tables (T=0) are permitted so that
    degenerate split ratios still partition the row set; loaders reject them.
    """

    timestamps: np.ndarray  # (T,) datetime64[ns], strictly increasing
    values: np.ndarray  # (T, M) float64
    columns: tuple[str, ...]
    target_name: str
    dropped_rows: int = 0

    def __post_init__(self) -> None:
        ts = np.asarray(self.timestamps, dtype="datetime64[ns]")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {vals.shape}")
        if len(ts) != vals.shape[0]:
            raise ValueError("timestamps and values disagree on row count")
        cols = tuple(self.columns)
        if vals.shape[1] != len(cols):
            raise ValueError("column names and value width disagree")
        if self.target_name not in cols:
            raise SchemaError(f"target column {self.target_name!r} not in table")
        if len(ts) > 1 and not (np.diff(ts.astype("int64")) > 0).all():
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", _readonly(ts))
        object.__setattr__(self, "values", _readonly(vals))
        object.__setattr__(self, "columns", cols)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    @property
    def target_col(self) -> int:
        return self.columns.index(self.target_name)

    def slice_rows(self, start: int, stop: int) -> "SeriesTable":
        """Contiguous row slice as a new table (dropped_rows not inherited)."""
        return SeriesTable(
            timestamps=self.timestamps[start:stop],
            values=self.values[start:stop],
            columns=self.columns,
            target_name=self.target_name,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values.copy(), columns=list(self.columns))
        frame.insert(0, TIMESTAMP_COLUMN, self.timestamps)
        return frame


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split ratios plus the training-scarcity fraction."""

    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    scarcity_fraction: float = 1.0

    def __post_init__(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise ConfigError("split ratios must be three non-negative reals")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1 within 1e-9")
        if not (0.0 < self.scarcity_fraction <= 1.0):
            raise ConfigError("scarcity_fraction must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class TimeWindow:
    """One training sample: L input rows, the next K target-column values."""

    inputs: np.ndarray  # (L, M)
    target: np.ndarray  # (K,)
    target_col: int
    origin_index: int

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("inputs must be an LxM matrix with L >= 1")
        if self.target.ndim != 1 or self.target.shape[0] < 1:
            raise ValueError("target must be a K-vector with K >= 1")
        if not (0 <= self.target_col < self.inputs.shape[1]):
            raise ValueError("target_col out of range")

    @property
    def L(self) -> int:
        return self.inputs.shape[0]

    @property
    def K(self) -> int:
        return self.target.shape[0]

    @property
    def M(self) -> int:
        return self.inputs.shape[1]


def load_dcdata(path, target_name: str) -> SeriesTable:
    """Load a DCData-format CSV: a ``timestamp`` column plus numeric channels.

    Timestamps may be ISO-8601 strings or epoch seconds (auto-detected). Rows
    with a missing or non-numeric value in any feature column are dropped and
    counted in ``dropped_rows``. Rows are returned in timestamp order.
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise EmptyDataError(f"no rows in {path}") from exc
    if TIMESTAMP_COLUMN not in frame.columns:
        raise SchemaError(f"CSV must contain a {TIMESTAMP_COLUMN!r} column")
    feature_cols = [c for c in frame.columns if c != TIMESTAMP_COLUMN]
    if target_name not in feature_cols:
        raise SchemaError(f"target column {target_name!r} missing from {path}")

    raw_ts = frame[TIMESTAMP_COLUMN]
    if pd.api.types.is_numeric_dtype(raw_ts):
        ts = pd.to_datetime(raw_ts, unit="s", errors="coerce")
    else:
        ts = pd.to_datetime(raw_ts, errors="coerce")
    numeric = frame[feature_cols].apply(pd.to_numeric, errors="coerce")

    keep = numeric.notna().all(axis=1).to_numpy() & ts.notna().to_numpy()
    dropped = int((~keep).sum())
    if int(keep.sum()) == 0:
        raise EmptyDataError(f"no usable rows in {path} ({dropped} dropped)")

    ts_kept = ts.to_numpy(dtype="datetime64[ns]")[keep]
    vals_kept = numeric.to_numpy(dtype=np.float64)[keep]
    order = np.argsort(ts_kept, kind="stable")
    return SeriesTable(
        timestamps=ts_kept[order],
        values=vals_kept[order],
        columns=tuple(feature_cols),
        target_name=target_name,
        dropped_rows=dropped,
    )


def chronological_split(
    table: SeriesTable, spec: SplitSpec
) -> tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Cut the table into contiguous train/val/test segments covering all rows.

    Sizes are floor(r1*T) and floor(r2*T), with the remainder going to the
    final segment, so the three pieces always partition the row set exactly.
    """
    n = table.T
    if n < 10:
        raise InsufficientDataError(f"need at least 10 rows to split, got {n}")
    n_train = _floor_frac(spec.ratios[0], n)
    n_val = _floor_frac(spec.ratios[1], n)
    return (
        table.slice_rows(0, n_train),
        table.slice_rows(n_train, n_train + n_val),
        table.slice_rows(n_train + n_val, n),
    )


def scarcity_slice(
    train: SeriesTable, fraction: float, from_start: bool = False
) -> SeriesTable:
    """Keep floor(fraction*T) chronologically contiguous training rows.

    Defaults to the suffix (most recent rows, closest to the test
    distribution); ``from_start=True`` keeps the prefix instead.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError("scarcity fraction must lie in (0, 1]")
    n = _floor_frac(fraction, train.T)
    if from_start:
        return train.slice_rows(0, n)
    return train.slice_rows(train.T - n, train.T)


def make_windows(
    table: SeriesTable, L: int, K: int, stride: int = 1
) -> list[TimeWindow]:
    """Sliding windows at origins 0, stride, 2*stride, ... with origin+L+K <= T.

    Each window pairs L input rows with the target column's next K values.
    Windows are built per segment, so they never cross a split boundary.
    """
    if L < 1 or K < 1:
        raise ValueError("L and K must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if L + K > table.T:
        raise InsufficientDataError(
            f"window needs L+K={L + K} rows but segment has {table.T}"
        )
    tc = table.target_col
    windows = []
    for origin in range(0, table.T - L - K + 1, stride):
        windows.append(
            TimeWindow(
                inputs=table.values[origin : origin + L],
                target=table.values[origin + L : origin + L + K, tc],
                target_col=tc,
                origin_index=origin,
            )
        )
    return windows


@dataclass(frozen=True, eq=False)
class SynthConfig:
    """Synthetic data-center telemetry: coupled device channels plus a target.

    Channels mimic a chilled-water plant: an exogenous outdoor-temperature
    driver and pump inlet/outlet temperatures coupled through ``coupling``
    (shape (M-1, M-1), default: neighbour mixing driven by the outdoor
    channel). The cooling-load target is its own daily/weekly seasonal
    pattern plus a fixed weighting of lagged channel deviations plus white
    noise, so cross-variable attention has real signal to find.
    """

    T: int = 4000
    M: int = 6
    noise: float = 0.1
    daily_amplitude: float = 1.0
    weekly_amplitude: float = 0.3
    coupling: np.ndarray | None = None
    target_name: str = "cooling_load"
    start: str = "2024-10-01"
    cadence_minutes: int = 5

    def __post_init__(self) -> None:
        if self.M < 2:
            raise ConfigError("synthetic tables need M >= 2 (target plus devices)")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        if self.coupling is not None:
            c = np.asarray(self.coupling, dtype=np.float64)
            n_dev = self.M - 1
            if c.shape != (n_dev, n_dev):
                raise ConfigError(
                    f"coupling must have shape ({n_dev}, {n_dev}), got {c.shape}"
                )
            object.__setattr__(self, "coupling", c)


def default_coupling(n_dev: int) -> np.ndarray:
    """Neighbour mixing among device channels, all driven by channel 0."""
    c = np.eye(n_dev)
    if n_dev > 1:
        c = c + 0.4 * np.roll(np.eye(n_dev), shift=1, axis=1)
        c[:, 0] += 0.3
        c[0] = np.eye(n_dev)[0]  # outdoor channel stays exogenous
    return c


def _channel_names(n_dev: int) -> list[str]:
    names = ["outdoor_temp"]
    for i in range(1, n_dev):
        pump = (i + 1) // 2
        side = "inlet" if i % 2 == 1 else "outlet"
        names.append(f"pump{pump}_{side}_temp")
    return names


def synth_generate(config: SynthConfig, seed: int) -> SeriesTable:
    """Deterministic synthetic telemetry table for a given seed."""
    n_dev = config.M - 1
    coupling = (
        np.asarray(config.coupling, dtype=np.float64)
        if config.coupling is not None
        else default_coupling(n_dev)
    )
    rng = np.random.default_rng(seed)
    t = np.arange(config.T, dtype=np.float64)

    steps_day = 1440 / config.cadence_minutes
    steps_week = 7 * steps_day
    phases = np.linspace(0.0, 0.9, n_dev, endpoint=True)

    base = config.daily_amplitude * np.sin(
        2 * np.pi * (t[None, :] / steps_day + phases[:, None])
    ) + config.weekly_amplitude * np.sin(
        2 * np.pi * (t[None, :] / steps_week + 0.5 * phases[:, None])
    )

    # AR(1) channel disturbances with stationary std = noise.
    rho = 0.8
    innov = rng.normal(0.0, 1.0, size=(n_dev, config.T))
    ar = np.empty_like(innov)
    ar[:, 0] = config.noise * innov[:, 0]
    scale = config.noise * math.sqrt(1.0 - rho**2)
    for k in range(1, config.T):
        ar[:, k] = rho * ar[:, k - 1] + scale * innov[:, k]

    channels = coupling @ (base + ar)
    deviations = coupling @ ar  # what the target actually reacts to

    target_seasonal = config.daily_amplitude * np.sin(
        2 * np.pi * t / steps_day
    ) + config.weekly_amplitude * np.sin(2 * np.pi * t / steps_week)

    weights = np.linspace(1.0, 0.5, n_dev)
    lagged_mix = np.zeros(config.T)
    for i in range(n_dev):
        lag = 3 + 2 * i
        shifted = np.zeros(config.T)
        shifted[lag:] = deviations[i, : config.T - lag]
        lagged_mix += weights[i] * shifted

    target = target_seasonal + lagged_mix + config.noise * rng.normal(
        0.0, 1.0, size=config.T
    )

    start = np.datetime64(config.start, "ns")
    step = np.timedelta64(config.cadence_minutes * 60, "s").astype("timedelta64[ns]")
    timestamps = start + step * np.arange(config.T)

    values = np.column_stack([channels.T, target])
    columns = tuple(_channel_names(n_dev) + [config.target_name])
    return SeriesTable(
        timestamps=timestamps,
        values=values,
        columns=columns,
        target_name=config.target_name,
    )

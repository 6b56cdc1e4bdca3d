"""Unified run configuration: one YAML file with sections, strict validation.

Unknown keys are rejected with the offending dotted key named; every field
has a default, so an empty config is a valid run. Command-line flags override
config keys, which override defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .alignment import Phase1Config
from .data import SeriesTable, SynthConfig, load_dcdata, synth_generate
from .errors import ConfigError
from .evalbench import BASELINE_VARIANTS, MODEL_VARIANTS, ExperimentGrid
from .forecaster import BackboneSpec, Phase2Config


@dataclass
class DataSection:
    source: str = "synth"  # "synth" or a CSV path
    target: str = "cooling_load"
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class WindowSection:
    L: int = 96
    K: int = 24
    stride: int = 1

    def __post_init__(self) -> None:
        if self.L < 1 or self.K < 1 or self.stride < 1:
            raise ConfigError("windows need L >= 1, K >= 1, stride >= 1")


@dataclass
class SplitSection:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    scarcity_fraction: float = 1.0
    scarcity_from_start: bool = False


@dataclass
class GridSection:
    fractions: tuple[float, ...] = (1.0, 0.5, 0.25)
    horizons: tuple[int, ...] = (12, 24, 48, 96)
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = MODEL_VARIANTS + BASELINE_VARIANTS


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    knowledge_base: str | None = None  # path to a [background]/[instruction] file
    data: DataSection = field(default_factory=DataSection)
    windows: WindowSection = field(default_factory=WindowSection)
    split: SplitSection = field(default_factory=SplitSection)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    grid: GridSection = field(default_factory=GridSection)

    def experiment_grid(self) -> ExperimentGrid:
        return ExperimentGrid(
            fractions=tuple(self.grid.fractions),
            horizons=tuple(self.grid.horizons),
            input_len=self.windows.L,
            seeds=tuple(self.grid.seeds),
            variants=tuple(self.grid.variants),
        )


_NESTED = {
    (RunConfig, "data"): DataSection,
    (RunConfig, "windows"): WindowSection,
    (RunConfig, "split"): SplitSection,
    (RunConfig, "phase1"): Phase1Config,
    (RunConfig, "phase2"): Phase2Config,
    (RunConfig, "grid"): GridSection,
    (DataSection, "synth"): SynthConfig,
    (Phase2Config, "backbone"): BackboneSpec,
}


def _build(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or cls.__name__!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            dotted = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown config key: {dotted}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and isinstance(value, dict):
            kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key)
        elif isinstance(value, list) and key != "coupling":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config section {path or 'root'}: {exc}") from exc


def load_run_config(path=None) -> RunConfig:
    """Load a YAML run config; a missing path means all defaults."""
    if path is None:
        return RunConfig()
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return RunConfig()
    return _build(RunConfig, raw)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def resolved_dict(cfg: RunConfig) -> dict:
    """Config with every default filled in, as plain YAML-safe data."""
    return _plain(cfg)


def dump_resolved(cfg: RunConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=False)


def load_table(cfg: RunConfig) -> SeriesTable:
    """Materialize the configured data source (synthetic or CSV)."""
    if cfg.data.source == "synth":
        synth = cfg.data.synth
        if synth.target_name != cfg.data.target:
            synth = dataclasses.replace(synth, target_name=cfg.data.target)
        return synth_generate(synth, seed=cfg.seed)
    return load_dcdata(cfg.data.source, cfg.data.target)

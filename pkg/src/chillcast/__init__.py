"""Data-center cooling-load forecasting with aligned text priors.

Two-phase pipeline: (1) contrastive alignment of window descriptions and
time-series windows in a shared latent space, after which the text encoder is
frozen; (2) variate-token forecasting through a frozen transformer backbone
with the encoded description injected as a prefix. Includes synthetic
telemetry, chronological splits and scarcity slices, baselines, and an
experiment-grid benchmark.
"""

from .alignment import (
    AlignmentCheckpoint,
    Phase1Config,
    SeriesEncoder,
    TextEncoder,
    TextTokenSequence,
    Tokenizer,
    encode_template,
    kari_loss,
    train_phase1,
)
from .data import (
    SeriesTable,
    SplitSpec,
    SynthConfig,
    TimeWindow,
    chronological_split,
    load_dcdata,
    make_windows,
    scarcity_slice,
    synth_generate,
)
from .errors import (
    CheckpointError,
    ChillcastError,
    ConfigError,
    EmptyDataError,
    InsufficientDataError,
    SchemaError,
)
from .evalbench import (
    ExperimentGrid,
    GridRunConfig,
    ReportRow,
    baseline_linear,
    baseline_persistence,
    emit_plots,
    emit_report,
    metric_mae,
    metric_mse,
    run_grid,
)
from .forecaster import (
    BackboneSpec,
    EgiaAttention,
    ForecastModel,
    ForecastRecord,
    FrozenBackbone,
    Phase2Config,
    assemble_input,
    train_phase2,
)
from .revin import NormStats, denormalize, fit_stats, normalize
from .template import (
    CatsTemplate,
    KnowledgeBase,
    build_template,
    default_knowledge_base,
    describe_stats,
    describe_trend,
    load_knowledge_base,
)

__version__ = "0.1.0"

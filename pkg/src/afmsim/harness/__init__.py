"""Experiment orchestration: configuration, multi-line scans, metrics and output files."""
from .config import ConfigError, ExperimentConfig, Resolved, apply_overrides, load_config, make_surface
from .experiment import EngageFailed, ExperimentResult, LineTrace, TRACE_COLUMNS, line_range, run_experiment, run_line
from .io import IoError, read_traces, write_outputs
from .metrics import (
    AggregateMetrics,
    EmptyTrace,
    Episode,
    Metrics,
    compute_metrics,
    detect_artefact_episodes,
    line_metrics,
    recovery_bumps,
)

__all__ = [
    "AggregateMetrics",
    "ConfigError",
    "EmptyTrace",
    "EngageFailed",
    "Episode",
    "ExperimentConfig",
    "ExperimentResult",
    "IoError",
    "LineTrace",
    "Metrics",
    "Resolved",
    "TRACE_COLUMNS",
    "apply_overrides",
    "compute_metrics",
    "detect_artefact_episodes",
    "line_metrics",
    "line_range",
    "load_config",
    "make_surface",
    "read_traces",
    "recovery_bumps",
    "run_experiment",
    "run_line",
    "write_outputs",
]

"""Experiment harness: configs, orchestration, figure data and the CLI."""

from .config import (ExperimentConfig, FilterSpec, MetricsSpec, ModelSpec, RateSpec, ReferenceSpec,
                     config_hash, dump_config, load_config, parse_config, preset_path, presets)
from .experiments import (OutputConflict, ResultTable, bimodal_cell, build_model, filtering_cell,
                          loglog_slope, monotone_violation, rate_cell, run_experiment, static_analysis)
from .plotdata import FIGURES, emit_plotdata
from .stability import StabilityReport, stability_probe

__all__ = [
    "ExperimentConfig", "FilterSpec", "MetricsSpec", "ModelSpec", "RateSpec", "ReferenceSpec",
    "config_hash", "dump_config", "load_config", "parse_config", "preset_path", "presets",
    "OutputConflict", "ResultTable", "bimodal_cell", "build_model", "filtering_cell", "loglog_slope",
    "monotone_violation", "rate_cell", "run_experiment", "static_analysis",
    "FIGURES", "emit_plotdata", "StabilityReport", "stability_probe",
]

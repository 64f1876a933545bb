"""Experiment harness: configs, task runners, metrics and analysis exports."""
from fimp.harness.analysis import capture_attention, export_attention, export_embeddings
from fimp.harness.config import MetricsReport, RunConfig, apply_overrides, load_config, save_config
from fimp.harness.runners import (
    linear_probe,
    run,
    run_classification,
    run_reconstruction,
    run_seeds,
    run_zero_shot,
)

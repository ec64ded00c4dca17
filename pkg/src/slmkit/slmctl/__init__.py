"""Checkpoints, pipeline configuration and orchestration, benchmarking, and the CLI."""

from .bench import BenchEntry, BenchReport, bench
from .checkpoint import CheckpointError, load_checkpoint, round_to_storage, save_checkpoint
from .config import ConfigError, PipelineConfig, config_from_dict, load_config
from .pipeline import read_report, run_pipeline

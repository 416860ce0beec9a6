"""Benchmark harness: datasets, training loops with windowed timing, sweeps."""

from .data import Dataset, IdxParseError, gen_classification, gen_regression, load_idx, write_idx
from .run import RunConfig, TimingSummary, run_training
from .bench import bench_cadence, bench_interactions, bench_lanes

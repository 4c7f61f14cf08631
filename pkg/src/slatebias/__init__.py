"""slatebias: a desk-scale lab for exposure bias in slate recommenders.

Simulates a population choosing from four-item slates, compiles dataset
pairs that differ only in how one item subset was exposed (frequency or
company), trains slate-aware and slate-blind models on both members, and
measures how far the exposure manipulation moved the models' item ranks.
"""

from .core import RngHandle, build_catalog, partition_users
from .harness import ExperimentConfig, emit_outputs, load_config, run_experiment

__version__ = "0.1.0"

__all__ = [
    "RngHandle",
    "build_catalog",
    "partition_users",
    "ExperimentConfig",
    "run_experiment",
    "emit_outputs",
    "load_config",
    "__version__",
]

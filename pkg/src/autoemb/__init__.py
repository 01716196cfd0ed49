"""Automated embedding-dimensionality search for streaming recommenders."""

from .autodiff import Tensor
from .bilevel import BilevelOptimizer, OptimizerConfig, hypergradient
from .config import ExperimentConfig, SynthSpec
from .data import Stream, parse_csv, split_stream, synth_stream
from .framework import AutoEmbModel, Batch
from .streaming import run

__version__ = "0.1.0"

__all__ = [
    "AutoEmbModel",
    "Batch",
    "BilevelOptimizer",
    "ExperimentConfig",
    "OptimizerConfig",
    "Stream",
    "SynthSpec",
    "Tensor",
    "hypergradient",
    "parse_csv",
    "run",
    "split_stream",
    "synth_stream",
]

"""Hybrid multi-CNN + vision-transformer hemorrhage classifier with a
tape-based autodiff core, synthetic CT phantom data and analysis tooling."""

from .config import ScopeformerConfig, load_config, preset
from .model import ScopeformerModel, assemble_pipeline
from .tensor import Tape, Tensor, backward, grad_check

__all__ = [
    "ScopeformerConfig", "ScopeformerModel", "Tape", "Tensor",
    "assemble_pipeline", "backward", "grad_check", "load_config", "preset",
]

__version__ = "0.1.0"

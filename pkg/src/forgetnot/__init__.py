"""forgetnot: exemplar-free continual learning with diffusion replay,
weight consolidation, and forgetting-bound diagnostics."""

__version__ = "0.1.0"

from . import (bound_diagnostics, continual_trainer, ddpm, ewc, metrics,
               replay_buffer, task_stream, vit_classifier)
from .continual_trainer import (DdpmOptions, DiagnosticsConfig, TrainConfig,
                                run_sequence)
from .task_stream import StreamConfig, make_synthetic_stream
from .vit_classifier import ViTClassifier, ViTConfig

__all__ = [
    "__version__",
    "bound_diagnostics", "continual_trainer", "ddpm", "ewc", "metrics",
    "replay_buffer", "task_stream", "vit_classifier",
    "DdpmOptions", "DiagnosticsConfig", "TrainConfig", "run_sequence",
    "StreamConfig", "make_synthetic_stream", "ViTClassifier", "ViTConfig",
]

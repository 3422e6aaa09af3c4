"""Two-stage multimodal video QA: moment proposal, then heterogeneous answer reasoning,
built on a small numpy autodiff core and trained on planted synthetic data."""

from .datamodel import ClipRecord, GeneratorConfig, generate_synthetic, load_dataset, save_dataset
from .harness import EvalReport, TrainConfig, ablate, evaluate, train
from .model import ModelConfig, build_params, forward

__all__ = [
    "ClipRecord",
    "EvalReport",
    "GeneratorConfig",
    "ModelConfig",
    "TrainConfig",
    "ablate",
    "build_params",
    "evaluate",
    "forward",
    "generate_synthetic",
    "load_dataset",
    "save_dataset",
    "train",
]

__version__ = "0.1.0"

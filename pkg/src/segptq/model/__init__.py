from .config import ModelConfig, StagePlan, stage_partition
from .segmenter import Model, PromptSpec, build_model
from .weights_io import load_weights, save_weights

__all__ = [
    "ModelConfig",
    "StagePlan",
    "stage_partition",
    "Model",
    "PromptSpec",
    "build_model",
    "save_weights",
    "load_weights",
]

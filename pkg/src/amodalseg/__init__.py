"""Coarse-to-fine amodal segmentation with a discrete mask latent space."""
from .config import CodecConfig, ModelConfig, TrainConfig, load_config
from .mask_vq import MaskCodec
from .pipeline import Pipeline, evaluate, infer, load_pipeline, save_pipeline

__all__ = [
    "CodecConfig",
    "ModelConfig",
    "TrainConfig",
    "load_config",
    "MaskCodec",
    "Pipeline",
    "evaluate",
    "infer",
    "load_pipeline",
    "save_pipeline",
]

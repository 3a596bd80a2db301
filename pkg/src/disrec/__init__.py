"""Group recommendation with disentangled preference and social-influence embeddings."""

from .config import TrainConfig
from .data import InteractionDataset, SplitSpec, generate_synthetic_influencer, load_dataset, split
from .graphs import build_graphs
from .model import ModelParams, forward, init_params
from .training import train

__all__ = [
    "InteractionDataset",
    "ModelParams",
    "SplitSpec",
    "TrainConfig",
    "build_graphs",
    "forward",
    "generate_synthetic_influencer",
    "init_params",
    "load_dataset",
    "split",
    "train",
]

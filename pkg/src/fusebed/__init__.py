"""Hybrid (audio content + metadata) language-based retrieval."""

from .data import Dataset, Item, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .model import HybridRetriever, ModelConfig
from .retrieval import EvalReport, build_index, evaluate_model, rank_items
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EvalReport",
    "HybridRetriever",
    "Item",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "build_index",
    "evaluate_model",
    "generate_synthetic",
    "load_dataset",
    "rank_items",
    "save_dataset",
    "train",
]

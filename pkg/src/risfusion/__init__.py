"""Text-driven infrared/visible image fusion with a referring-segmentation head."""
from .data import Dataset, Sample, make_toy_data, make_toy_split, read_manifest, split_regions, write_manifest
from .errors import FormatError, NonFiniteError, RisFusionError, ShapeError, TrainingError, ValidationError
from .estimator import RISFusion, check_dataset
from .losses import LossWeights, dice_loss, fusion_loss, ssim, total_loss
from .metrics import MetricsReport, iou
from .model import ModelConfig, RISFusionModel
from .text import TextEmbedding, load_embedding, save_embedding, toy_embed
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FormatError",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "NonFiniteError",
    "RISFusion",
    "RISFusionModel",
    "RisFusionError",
    "Sample",
    "ShapeError",
    "TextEmbedding",
    "TrainConfig",
    "TrainingError",
    "ValidationError",
    "check_dataset",
    "dice_loss",
    "evaluate",
    "fusion_loss",
    "iou",
    "load_embedding",
    "make_toy_data",
    "make_toy_split",
    "read_manifest",
    "save_embedding",
    "split_regions",
    "ssim",
    "total_loss",
    "toy_embed",
    "train",
    "write_manifest",
]

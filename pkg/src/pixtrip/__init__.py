"""Pixel-level triplet loss and desk-scale Siamese co-segmentation."""
from .data import CorpusManifest, ImagePair, generate_corpus, load_pair, read_manifest, save_mask
from .estimator import CoSegmenter
from .losses import (
    LossConfig,
    combined_loss,
    cross_entropy_loss,
    dice_loss,
    focal_loss,
    is_triplet_loss,
    triplet_loss_single,
)
from .metrics import EvalRecord, binarize, evaluate
from .model import CoSegModel, ModelConfig, correlation_block, forward_pair, init_params
from .sampler import SampleSets, rowwise_sq_dist, sample_pixel_sets
from .tensor import Tensor
from .train import RunLog, TrainConfig, evaluate_split, sgd_step

__version__ = "0.1.0"

__all__ = [
    "CoSegModel",
    "CoSegmenter",
    "CorpusManifest",
    "EvalRecord",
    "ImagePair",
    "LossConfig",
    "ModelConfig",
    "RunLog",
    "SampleSets",
    "Tensor",
    "TrainConfig",
    "binarize",
    "combined_loss",
    "correlation_block",
    "cross_entropy_loss",
    "dice_loss",
    "evaluate",
    "evaluate_split",
    "focal_loss",
    "forward_pair",
    "generate_corpus",
    "init_params",
    "is_triplet_loss",
    "load_pair",
    "read_manifest",
    "rowwise_sq_dist",
    "sample_pixel_sets",
    "save_mask",
    "sgd_step",
    "triplet_loss_single",
]

"""Robustness analysis of image-to-brain-response encoders on synthetic ground truth.

The package generates annotated scenes with a known linear "brain", trains
filter-bank + PCA + ridge encoders as disjoint-fold ensembles, and measures
how mask-driven augmentations shift the predicted responses.
"""

__version__ = "0.1.0"

from .augment import AugmentationKind, AugmentationParams, apply_augmentation
from .core import BrainResponse, RoiAtlas, StimulusDataset, load_dataset, save_dataset
from .encoder import FeatureBankConfig, TrainedEncoder, load_encoder, save_encoder, train_encoder
from .ensemble import partition_folds, predict_ensemble, train_ensemble, uncertainty_decomposition
from .synthgen import SynthConfig, generate_dataset

__all__ = [
    "AugmentationKind",
    "AugmentationParams",
    "BrainResponse",
    "FeatureBankConfig",
    "RoiAtlas",
    "StimulusDataset",
    "SynthConfig",
    "TrainedEncoder",
    "apply_augmentation",
    "generate_dataset",
    "load_dataset",
    "load_encoder",
    "partition_folds",
    "predict_ensemble",
    "save_dataset",
    "save_encoder",
    "train_encoder",
    "train_ensemble",
    "uncertainty_decomposition",
]

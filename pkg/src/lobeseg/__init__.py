"""Lung lobe segmentation: a volumetric encoder-decoder with an auxiliary
airway head, trained on synthetic CT phantoms with a numpy autodiff engine."""

from .estimator import CubeResampler, HUClipper, VNetMTLSegmenter, ZScoreNormalizer, make_pipeline
from .losses import DiceConfig, LossWeights, combined_loss, dice_loss, hard_dice
from .phantom import PhantomSpec, generate_phantom, make_dataset
from .preprocess import LabelMap, PreprocessConfig, Volume, preprocess_case
from .tensor import Tensor, no_grad, precision
from .trainer import TrainConfig, lr_on_plateau, train
from .vnet import ModelConfig, VNet, build_model

__version__ = "0.1.0"

__all__ = [
    "CubeResampler",
    "DiceConfig",
    "HUClipper",
    "LabelMap",
    "LossWeights",
    "ModelConfig",
    "PhantomSpec",
    "PreprocessConfig",
    "Tensor",
    "TrainConfig",
    "VNet",
    "VNetMTLSegmenter",
    "Volume",
    "ZScoreNormalizer",
    "build_model",
    "combined_loss",
    "dice_loss",
    "generate_phantom",
    "hard_dice",
    "lr_on_plateau",
    "make_dataset",
    "make_pipeline",
    "no_grad",
    "precision",
    "preprocess_case",
    "train",
]

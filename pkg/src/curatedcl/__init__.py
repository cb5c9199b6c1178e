"""Contrastive pretraining with a Huber-regularized NT-Xent loss and Fréchet-distance batch gating."""

from .config import TrainConfig, desk_profile, load_config, paper_profile
from .curation import calibrate_threshold, curate, frd, frd_between
from .datasets import ImageDataset, load_named, make_synthetic
from .errors import ConfigError, ContractError, CuratedCLError, DimensionError, FormatError, NumericalError
from .evaluation import extract_embeddings, knn_probe, linear_probe
from .losses import LossConfig, nt_xent, regularized_loss
from .model import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .trainer import pretrain, run_ablation

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CuratedCLError",
    "DimensionError",
    "EncoderConfig",
    "FormatError",
    "ImageDataset",
    "LossConfig",
    "NumericalError",
    "TrainConfig",
    "calibrate_threshold",
    "curate",
    "desk_profile",
    "extract_embeddings",
    "frd",
    "frd_between",
    "init_params",
    "knn_probe",
    "linear_probe",
    "load_checkpoint",
    "load_config",
    "load_named",
    "make_synthetic",
    "nt_xent",
    "paper_profile",
    "pretrain",
    "regularized_loss",
    "run_ablation",
    "save_checkpoint",
]

"""Conditional density estimation by learning a monotone CDF and differentiating it."""
from .data import Dataset, NormStats, compute_norm_stats, load_csv, sample_toy, true_density
from .model import CondDensityModel, ModelConfig, conditional_cdf, conditional_pdf, joint_log_density, load_checkpoint, sample, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CondDensityModel",
    "Dataset",
    "ModelConfig",
    "NormStats",
    "TrainConfig",
    "compute_norm_stats",
    "conditional_cdf",
    "conditional_pdf",
    "joint_log_density",
    "load_checkpoint",
    "load_csv",
    "sample",
    "sample_toy",
    "save_checkpoint",
    "train",
    "true_density",
]

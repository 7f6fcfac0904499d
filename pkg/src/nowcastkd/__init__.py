"""Radar precipitation nowcasting with short-to-long horizon distillation."""
from .distill import DistillConfig, augment_dataset, rollout, train_direct, train_long, train_short
from .kernels import BACKEND
from .loss import LossConfig, weighted_mse, weighted_mse_grad, weighted_mse_torch
from .metrics import MetricAccumulator, MetricReport, evaluate_dataset
from .model import ModelConfig, NowcastModel, init_model, load_model, save_model
from .radar_data import DatasetSpec, RadarSequence, SyntheticGenConfig, generate_synthetic, load_dataset
from .trainer import TrainConfig, train

__version__ = "0.1.0"

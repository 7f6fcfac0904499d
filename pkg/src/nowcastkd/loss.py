"""Heavy-rain weighted MSE.

Pixels whose ground-truth raw intensity exceeds ``tau`` get weight ``w_max``,
all others weight 1. The weight is a function of the target only. Squared
errors are taken on normalized values; the threshold test is done in raw
units (0..255).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import kernels


@dataclass
class LossConfig:
    tau: float = 219.0
    w_max: float = 10.0
    reduction: str = "mean"  # or "sum"

    def __post_init__(self):
        if self.w_max < 1:
            raise ValueError(f"w_max must be >= 1, got {self.w_max}")
        if not 0 <= self.tau <= 255:
            raise ValueError(f"tau must lie in [0, 255], got {self.tau}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


def pixel_weight(target_raw, config: LossConfig):
    """1 where ``target_raw <= tau``, ``w_max`` elsewhere. Works on numpy or torch."""
    if isinstance(target_raw, torch.Tensor):
        return torch.where(target_raw > config.tau, config.w_max, 1.0).to(
            target_raw.dtype if target_raw.is_floating_point() else torch.float32
        )
    return np.where(np.asarray(target_raw) > config.tau, float(config.w_max), 1.0)


def _check(pred, target, target_raw):
    if pred.shape != target.shape or pred.shape != target_raw.shape:
        raise ValueError(
            f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"target_raw {tuple(target_raw.shape)}"
        )


def _flat(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).ravel())


def _scale(n, config):
    return 1.0 / n if config.reduction == "mean" and n else 1.0


def weighted_mse(pred, target, target_raw, config: LossConfig) -> float:
    """Weighted squared error of numpy arrays, reduced per ``config.reduction``."""
    pred, target, target_raw = np.asarray(pred), np.asarray(target), np.asarray(target_raw)
    _check(pred, target, target_raw)
    value, _ = kernels.weighted_sq_error(
        _flat(pred), _flat(target), _flat(target_raw), float(config.tau), float(config.w_max),
        _scale(pred.size, config),
    )
    return value


def weighted_mse_grad(pred, target, target_raw, config: LossConfig) -> np.ndarray:
    """Analytic gradient ``2 * w * (pred - target) / N`` (``N = 1`` for sum)."""
    pred, target, target_raw = np.asarray(pred), np.asarray(target), np.asarray(target_raw)
    _check(pred, target, target_raw)
    _, grad = kernels.weighted_sq_error(
        _flat(pred), _flat(target), _flat(target_raw), float(config.tau), float(config.w_max),
        _scale(pred.size, config),
    )
    return grad.reshape(pred.shape)


def raw_from_normalized(target: torch.Tensor) -> torch.Tensor:
    """Recover raw integer intensities from normalized targets."""
    return torch.round(target * 255.0)


def weighted_mse_torch(pred: torch.Tensor, target: torch.Tensor, config: LossConfig,
                       target_raw: torch.Tensor | None = None) -> torch.Tensor:
    """Differentiable counterpart of ``weighted_mse`` used during training."""
    if target_raw is None:
        target_raw = raw_from_normalized(target)
    _check(pred, target, target_raw)
    w = pixel_weight(target_raw, config).to(pred.dtype)
    err = w * (pred - target) ** 2
    return err.mean() if config.reduction == "mean" else err.sum()

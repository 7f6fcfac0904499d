"""Short-to-long horizon distillation.

1. ``train_short`` fits a teacher with horizon ``t_short`` on random windows
   of the real sequences.
2. ``augment_dataset`` rolls the frozen teacher forward autoregressively and
   appends ``t_long`` synthetic frames to every training sequence.
3. ``train_long`` fits the student with horizon ``t_long`` on random windows
   of the augmented sequences; late windows have partly or fully synthetic
   targets.

The student is an ordinary single-pass model; nothing changes at inference.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .loss import LossConfig
from .model import ModelConfig, NowcastModel, init_model, parameter_hash
from .radar_data import ConfigError, RadarSequence, denormalize, load_dataset, normalize, read_info, write_dataset
from .trainer import TrainConfig, ValidationSet, train

logger = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    t_in: int = 13
    t_long: int = 12
    t_short: int | None = None  # half of t_long when unset
    rollout_steps: int = 2
    sampling: str = "uniform"
    rng_seed: int = 0

    def __post_init__(self):
        if self.t_short is None:
            self.t_short = max(self.t_long // 2, 1)
        if min(self.t_in, self.t_long, self.t_short, self.rollout_steps) < 1:
            raise ConfigError("distill: t_in, t_long, t_short and rollout_steps must be >= 1")
        if self.rollout_steps * self.t_short < self.t_long:
            raise ConfigError(
                f"distill: rollout_steps * t_short = {self.rollout_steps * self.t_short} "
                f"cannot cover t_long = {self.t_long}"
            )
        if self.sampling != "uniform":
            raise ConfigError(f"distill.sampling: only 'uniform' is supported, got {self.sampling!r}")

    @property
    def source_length(self) -> int:
        return self.t_in + self.t_long

    @property
    def augmented_length(self) -> int:
        return self.t_in + 2 * self.t_long


@dataclass
class AugmentedSequence:
    frames: np.ndarray  # float32 [t_in + 2 t_long, H, W] in [0, 1]
    boundary: int
    source_id: str


# -- rollout and augmentation ----------------------------------------------


@torch.no_grad()
def rollout(teacher: NowcastModel, seq_frames, n_frames: int) -> np.ndarray:
    """Extend ``seq_frames`` by ``n_frames`` teacher predictions.

    ``seq_frames`` is ``[L, H, W]`` or batched ``[B, L, H, W]``, normalized.
    Each step feeds the newest ``t_in`` frames (real or already predicted) to
    the teacher and appends its ``t_out`` outputs; the result is truncated to
    ``n_frames``.
    """
    t_in, t_step = teacher.config.t_in, teacher.config.t_out
    seq = np.asarray(seq_frames, dtype=np.float32)
    single = seq.ndim == 3
    if single:
        seq = seq[None]
    if seq.ndim != 4:
        raise ValueError(f"rollout expects [L, H, W] or [B, L, H, W], got {seq.shape}")
    if seq.shape[1] < t_in:
        raise ValueError(f"rollout needs at least t_in = {t_in} frames, got {seq.shape[1]}")
    was_training = teacher.training
    teacher.eval()
    try:
        window = torch.from_numpy(np.ascontiguousarray(seq[:, -t_in:]))
        out = []
        for _ in range(math.ceil(n_frames / t_step)):
            pred = teacher(window.unsqueeze(2)).squeeze(2)
            out.append(pred)
            window = torch.cat([window, pred], dim=1)[:, -t_in:]
        result = torch.cat(out, dim=1)[:, :n_frames].numpy() if out else np.zeros((seq.shape[0], 0, *seq.shape[2:]),
                                                                                   dtype=np.float32)
    finally:
        teacher.train(was_training)
    return result[0] if single else result


def _check_teacher(teacher: NowcastModel, config: DistillConfig) -> None:
    c = teacher.config
    if c.t_in != config.t_in or c.t_out != config.t_short:
        raise ConfigError(
            f"teacher horizon (t_in={c.t_in}, t_out={c.t_out}) does not match "
            f"distill config (t_in={config.t_in}, t_short={config.t_short})"
        )


def augment_dataset(teacher: NowcastModel, dataset: Sequence[RadarSequence], config: DistillConfig, *,
                    path=None, batch_size: int = 16, teacher_hash: str | None = None) -> list[AugmentedSequence]:
    """Append ``t_long`` teacher frames to every sequence (cropped to ``t_in + t_long``).

    When ``path`` is given the result is also written in the dataset format,
    with synthetic frames rounded to uint8 and the manifest carrying
    ``boundary`` and ``teacher_checkpoint_hash``.
    """
    _check_teacher(teacher, config)
    L = config.source_length
    out: list[AugmentedSequence] = []
    seqs = list(dataset)
    for s in seqs:
        if s.t_total < L:
            raise ValueError(f"sequence {s.id!r} has {s.t_total} frames, needs {L}")
    for i in range(0, len(seqs), batch_size):
        chunk = seqs[i:i + batch_size]
        real = np.stack([normalize(s.frames[:L]) for s in chunk])
        synth = rollout(teacher, real, config.t_long)
        for s, r, syn in zip(chunk, real, synth):
            out.append(AugmentedSequence(np.concatenate([r, syn], axis=0), L, s.id))
    if path is not None:
        write_augmented(out, path, teacher_hash or parameter_hash(teacher))
    return out


def write_augmented(augmented: Sequence[AugmentedSequence], path, teacher_hash: str) -> None:
    seqs = [RadarSequence(a.source_id, denormalize(a.frames)) for a in augmented]
    boundary = augmented[0].boundary if augmented else None
    write_dataset(seqs, path, boundary=boundary, teacher_checkpoint_hash=teacher_hash)


def load_augmented(path, expected_teacher_hash: str | None = None) -> list[AugmentedSequence]:
    info = read_info(path)
    if info.boundary is None:
        raise ConfigError(f"{path}: manifest has no 'boundary'; not an augmented dataset")
    if expected_teacher_hash is not None and info.teacher_checkpoint_hash != expected_teacher_hash:
        logger.warning("teacher hash in %s (%s) does not match the given teacher (%s)",
                       path, info.teacher_checkpoint_hash, expected_teacher_hash)
    return [AugmentedSequence(normalize(s.frames), info.boundary, s.id) for s in load_dataset(Path(path))]


# -- sampling ---------------------------------------------------------------


def sample_subsequence(frames, t_in: int, t_out: int, rng: np.random.Generator):
    """Draw ``r`` uniformly from ``0..L - t_in - t_out`` and cut ``(x, y, r)``."""
    L = len(frames)
    if L < t_in + t_out:
        raise ValueError(f"sequence of length {L} is shorter than t_in + t_out = {t_in + t_out}")
    r = int(rng.integers(0, L - t_in - t_out + 1))
    return frames[r:r + t_in], frames[r + t_in:r + t_in + t_out], r


def make_sampler(t_in: int, t_out: int):
    def sampler(frames, rng):
        return sample_subsequence(frames, t_in, t_out, rng)

    return sampler


# -- training stages --------------------------------------------------------


def _frames(dataset, length=None):
    out = []
    for s in dataset:
        f = s.frames if isinstance(s, AugmentedSequence) else normalize(s.frames)
        out.append(np.asarray(f[:length] if length else f, dtype=np.float32))
    return out


def _ids(dataset):
    return [getattr(s, "id", None) or getattr(s, "source_id", "?") for s in dataset]


def _validation(val_set, t_in, t_out, thresholds):
    if not val_set:
        return None
    return ValidationSet.from_frames(_frames(val_set), t_in, t_out, thresholds)


def train_short(train_set: Sequence[RadarSequence], val_set: Sequence[RadarSequence], model_config: ModelConfig,
                distill_config: DistillConfig, train_config: TrainConfig, loss_config: LossConfig,
                thresholds, *, run_dir=None, resume=False):
    """Train the short-horizon teacher on random windows of the real sequences.

    Window starts range over ``0..t_long - t_short``.
    """
    dc = distill_config
    cfg = replace(model_config, t_in=dc.t_in, t_out=dc.t_short)
    model = init_model(cfg)
    return train(model, _frames(train_set, dc.source_length), _validation(val_set, dc.t_in, dc.t_short, thresholds),
                 make_sampler(dc.t_in, dc.t_short), loss_config, train_config, run_dir=run_dir, resume=resume,
                 train_ids=_ids(train_set))


def train_long(augmented: Sequence[AugmentedSequence], val_set: Sequence[RadarSequence], model_config: ModelConfig,
               distill_config: DistillConfig, train_config: TrainConfig, loss_config: LossConfig,
               thresholds, *, run_dir=None, resume=False):
    """Train the long-horizon student on random windows of augmented sequences."""
    dc = distill_config
    for a in augmented:
        if len(a.frames) != dc.augmented_length:
            raise ValueError(f"augmented sequence {a.source_id!r} has {len(a.frames)} frames, "
                             f"expected {dc.augmented_length}")
    cfg = replace(model_config, t_in=dc.t_in, t_out=dc.t_long)
    model = init_model(cfg)
    return train(model, _frames(augmented), _validation(val_set, dc.t_in, dc.t_long, thresholds),
                 make_sampler(dc.t_in, dc.t_long), loss_config, train_config, run_dir=run_dir, resume=resume,
                 train_ids=_ids(augmented))


def train_direct(train_set: Sequence[RadarSequence], val_set: Sequence[RadarSequence], model_config: ModelConfig,
                 distill_config: DistillConfig, train_config: TrainConfig, loss_config: LossConfig,
                 thresholds, *, run_dir=None, resume=False):
    """Baseline without distillation: horizon ``t_long`` on the real sequences only."""
    dc = distill_config
    cfg = replace(model_config, t_in=dc.t_in, t_out=dc.t_long)
    model = init_model(cfg)
    return train(model, _frames(train_set, dc.source_length), _validation(val_set, dc.t_in, dc.t_long, thresholds),
                 make_sampler(dc.t_in, dc.t_long), loss_config, train_config, run_dir=run_dir, resume=resume,
                 train_ids=_ids(train_set))

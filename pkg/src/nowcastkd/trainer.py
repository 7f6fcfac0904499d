"""Optimization loop, checkpoints and run bookkeeping.

Run directory layout::

    <run_dir>/config.json            snapshot written by the caller (CLI)
    <run_dir>/history.jsonl          one JSON record per epoch, append-only
    <run_dir>/checkpoints/last.npz   model + optimizer + history, for --resume
    <run_dir>/checkpoints/best.npz   best validation CSI-M so far

Training checkpoints extend the model key scheme with ``optim/state/<i>/<k>``
arrays, ``optim/param_groups`` (JSON bytes), ``history`` (JSON bytes) and
``epoch``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import kernels
from .loss import LossConfig, weighted_mse_torch
from .metrics import ContingencyCounts, categorical_scores
from .model import CheckpointError, NowcastModel, pack_model, read_npz, unpack_model, write_npz

logger = logging.getLogger(__name__)

Sampler = Callable[[np.ndarray, np.random.Generator], tuple]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    batch_size: int = 8
    max_epochs: int = 100
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = 1.0
    schedule: str = "none"  # or "onecycle"
    val_interval: int = 1
    patience: int | None = None
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.val_interval < 1:
            raise ValueError("max_epochs >= 0 and val_interval >= 1 required")
        if self.schedule not in ("none", "onecycle"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_csi_m: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    selected_epoch: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=True)

    @classmethod
    def from_json(cls, s: str) -> "TrainHistory":
        return cls(**json.loads(s))


@dataclass
class ValidationSet:
    """Fixed (input, target) windows scored after each epoch."""

    x: np.ndarray  # [N, t_in, H, W] in [0, 1]
    y: np.ndarray  # [N, t_out, H, W]
    thresholds: tuple

    @classmethod
    def from_frames(cls, frames: Sequence[np.ndarray], t_in: int, t_out: int, thresholds) -> "ValidationSet":
        stack = np.stack([np.asarray(f, dtype=np.float32)[: t_in + t_out] for f in frames])
        return cls(stack[:, :t_in], stack[:, t_in:], tuple(thresholds))


def _onecycle_lr(step: int, total: int, peak: float) -> float:
    warm = max(int(0.3 * total), 1)
    start, end = peak / 25.0, peak / 1e4
    if step < warm:
        return start + (peak - start) * (1 - math.cos(math.pi * step / warm)) / 2
    frac = (step - warm) / max(total - warm, 1)
    return end + (peak - end) * (1 + math.cos(math.pi * min(frac, 1.0))) / 2


@torch.no_grad()
def validate(model: NowcastModel, val: ValidationSet, loss_config: LossConfig,
             batch_size: int = 32) -> tuple[float, float]:
    """Return (weighted MSE, pooled-1 micro-averaged CSI-M) on ``val``."""
    model.eval()
    counts = {t: ContingencyCounts() for t in val.thresholds}
    loss_sum, n = 0.0, 0
    for i in range(0, len(val.x), batch_size):
        x = torch.from_numpy(val.x[i:i + batch_size]).unsqueeze(2)
        y = torch.from_numpy(val.y[i:i + batch_size]).unsqueeze(2)
        y_hat = model(x)
        loss_sum += float(weighted_mse_torch(y_hat, y, loss_config)) * y.numel()
        n += y.numel()
        p_raw = y_hat.squeeze(2).double().numpy() * 255.0
        g_raw = np.rint(y.squeeze(2).double().numpy() * 255.0)
        for p, g in zip(p_raw, g_raw):
            p, g = np.ascontiguousarray(p), np.ascontiguousarray(g)
            for t in val.thresholds:
                counts[t] = counts[t] + ContingencyCounts.from_array(
                    kernels.contingency_by_lead(p, g, float(t), 1).sum(axis=0)
                )
    model.train()
    csis = [categorical_scores(c)["csi"] for c in counts.values()]
    csis = [c for c in csis if not math.isnan(c)]
    return loss_sum / max(n, 1), float(np.mean(csis)) if csis else math.nan


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: NowcastModel, optimizer: torch.optim.Optimizer | None,
                    history: TrainHistory | None, path, epoch: int = -1) -> None:
    extra = {
        "epoch": np.array(epoch, dtype=np.int64),
        "history": np.frombuffer((history or TrainHistory()).to_json().encode(), dtype=np.uint8),
    }
    if optimizer is not None:
        sd = optimizer.state_dict()
        groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
        extra["optim/param_groups"] = np.frombuffer(json.dumps(groups).encode(), dtype=np.uint8)
        for idx, st in sd["state"].items():
            for k, v in st.items():
                extra[f"optim/state/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    write_npz(path, pack_model(model, extra))


@dataclass
class Checkpoint:
    model: NowcastModel
    optimizer_state: dict | None
    history: TrainHistory
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    arrays = read_npz(path)
    if "format_version" not in arrays:
        raise CheckpointError(f"{path}: not a model checkpoint (no format_version)")
    model = unpack_model(arrays)
    history = TrainHistory.from_json(bytes(arrays["history"]).decode()) if "history" in arrays else TrainHistory()
    optim_state = None
    if "optim/param_groups" in arrays:
        state: dict = {}
        for key, val in arrays.items():
            if key.startswith("optim/state/"):
                _, _, idx, name = key.split("/", 3)
                state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(val))
        optim_state = {"state": state, "param_groups": json.loads(bytes(arrays["optim/param_groups"]).decode())}
    epoch = int(arrays["epoch"]) if "epoch" in arrays else -1
    return Checkpoint(model, optim_state, history, epoch)


def _make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


# -- main loop --------------------------------------------------------------


def train(model: NowcastModel, train_frames: Sequence[np.ndarray], val: ValidationSet | None,
          sampler: Sampler, loss_config: LossConfig, train_config: TrainConfig, *,
          run_dir=None, resume: bool = False, train_ids: Sequence[str] | None = None):
    """Fit ``model`` in place and return ``(best_model, history)``.

    ``train_frames`` are normalized ``[L, H, W]`` arrays; ``sampler`` cuts one
    ``(x, y, r)`` window from a sequence. Batch order and window starts are
    drawn from a generator seeded by ``(seed, epoch)``, so an interrupted run
    resumed from ``last.npz`` follows the same trajectory.
    """
    cfg = train_config
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    frames = [np.asarray(f, dtype=np.float32) for f in train_frames]
    if not frames:
        raise TrainingError("training set is empty")
    ids = list(train_ids) if train_ids is not None else [str(i) for i in range(len(frames))]
    run_dir = Path(run_dir) if run_dir is not None else None
    ckpt_dir = run_dir / "checkpoints" if run_dir is not None else None

    optimizer = _make_optimizer(model, cfg)
    history = TrainHistory()
    start_epoch = 0
    best_state = None
    if resume and ckpt_dir is not None and (ckpt_dir / "last.npz").exists():
        ck = load_checkpoint(ckpt_dir / "last.npz")
        model.load_state_dict(ck.model.state_dict())
        if ck.optimizer_state is not None:
            optimizer.load_state_dict(ck.optimizer_state)
        history, start_epoch = ck.history, ck.epoch + 1
        if (ckpt_dir / "best.npz").exists():
            best_state = load_checkpoint(ckpt_dir / "best.npz").model.state_dict()
        logger.info("resumed from epoch %d", ck.epoch)

    n_batches = math.ceil(len(frames) / cfg.batch_size)
    total_steps = max(cfg.max_epochs * n_batches, 1)
    best_score = _best_score(history)
    stale = 0
    model.train()
    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(frames))
        loss_sum, count = 0.0, 0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                x, y, _ = sampler(frames[i], rng)
                xs.append(x)
                ys.append(y)
            x = torch.from_numpy(np.stack(xs)).unsqueeze(2)
            y = torch.from_numpy(np.stack(ys)).unsqueeze(2)
            if cfg.schedule == "onecycle":
                for g in optimizer.param_groups:
                    g["lr"] = _onecycle_lr(epoch * n_batches + b, total_steps, cfg.learning_rate)
            loss = weighted_mse_torch(model(x), y, loss_config)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}, "
                    f"sequences {[ids[i] for i in idx]}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            loss_sum += loss.item() * len(idx)
            count += len(idx)

        history.train_loss.append(loss_sum / count)
        if val is not None and len(val.x) and (epoch + 1) % cfg.val_interval == 0:
            vl, vc = validate(model, val, loss_config)
        else:
            vl, vc = math.nan, math.nan
        history.val_loss.append(vl)
        history.val_csi_m.append(vc)
        history.wall_time.append(time.perf_counter() - t0)

        score = vc if not math.isnan(vc) else -math.inf
        if best_state is None or score > best_score:
            best_score = score
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.selected_epoch = epoch
            stale = 0
            if ckpt_dir is not None:
                save_checkpoint(model, None, history, ckpt_dir / "best.npz", epoch)
        else:
            stale += 1
        logger.info("epoch %d: train %.5f val %.5f csi-m %.4f (%.1fs)", epoch, history.train_loss[-1],
                    vl, vc, history.wall_time[-1])
        if run_dir is not None:
            with open(run_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch, "train_loss": history.train_loss[-1], "val_loss": vl,
                                     "val_csi_m": vc, "wall_time": history.wall_time[-1]}) + "\n")
            save_checkpoint(model, optimizer, history, ckpt_dir / "last.npz", epoch)
        if cfg.patience is not None and stale >= cfg.patience:
            logger.info("early stop after %d epochs without improvement", stale)
            break

    best = NowcastModel(model.config)
    best.load_state_dict(best_state if best_state is not None else model.state_dict())
    return best, history


def _best_score(history: TrainHistory) -> float:
    if history.selected_epoch is None:
        return -math.inf
    v = history.val_csi_m[history.selected_epoch]
    return -math.inf if v is None or math.isnan(v) else v

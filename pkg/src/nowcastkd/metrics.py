"""Forecast verification scores.

Conventions:

* a cell is an event when its raw intensity is ``>= threshold``;
* pooling is applied to the binarized field with non-overlapping ``k x k``
  tiles (a tile is an event if any of its cells is);
* dataset scores are micro-averaged: contingency counts are summed over the
  whole set and scores are computed once at the end;
* a ratio with a zero denominator is NaN and is left out of averages.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import kernels

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    def __add__(self, other: "ContingencyCounts") -> "ContingencyCounts":
        return ContingencyCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.correct_negatives + other.correct_negatives,
        )

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def as_list(self) -> list:
        return [self.hits, self.misses, self.false_alarms, self.correct_negatives]

    @classmethod
    def from_array(cls, a) -> "ContingencyCounts":
        return cls(*(int(v) for v in a))


def binarize(field, threshold) -> np.ndarray:
    return np.asarray(field) >= threshold


def max_pool(grid, k: int) -> np.ndarray:
    """Non-overlapping ``k x k`` any-pooling of a boolean grid ``[..., H, W]``."""
    grid = np.asarray(grid, dtype=bool)
    H, W = grid.shape[-2:]
    if H % k or W % k:
        raise ValueError(f"grid {H}x{W} is not divisible by pool size {k}")
    if k == 1:
        return grid
    lead = grid.shape[:-2]
    return grid.reshape(*lead, H // k, k, W // k, k).any(axis=(-3, -1))


def _as_thw(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"expected [T, H, W] or [H, W], got shape {a.shape}")
    return np.ascontiguousarray(a)


def contingency_by_lead(pred, gt, threshold, pool: int = 1) -> np.ndarray:
    """Per-lead-time counts ``[T, 4]`` (hits, misses, false alarms, correct negatives)."""
    p, g = _as_thw(pred), _as_thw(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    H, W = p.shape[1:]
    if H % pool or W % pool:
        raise ValueError(f"grid {H}x{W} is not divisible by pool size {pool}")
    return kernels.contingency_by_lead(p, g, float(threshold), int(pool))


def contingency(pred, gt, threshold, pool: int = 1) -> ContingencyCounts:
    return ContingencyCounts.from_array(contingency_by_lead(pred, gt, threshold, pool).sum(axis=0))


def _ratio(num, den):
    return num / den if den else math.nan


def categorical_scores(counts: ContingencyCounts) -> dict:
    tp, fn, fp, tn = counts.hits, counts.misses, counts.false_alarms, counts.correct_negatives
    hss_den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    return {
        "csi": _ratio(tp, tp + fn + fp),
        "pod": _ratio(tp, tp + fn),
        "far": _ratio(fp, tp + fp),
        "hss": _ratio(2.0 * (tp * tn - fn * fp), hss_den),
    }


def nanmean_logged(values: Iterable[float], what: str = "score") -> float:
    vals = list(values)
    kept = [v for v in vals if not math.isnan(v)]
    if len(kept) < len(vals):
        logger.info("%s: excluded %d undefined value(s) from the mean", what, len(vals) - len(kept))
    return float(np.mean(kept)) if kept else math.nan


def csi_mean(pred, gt, thresholds: Sequence[float], pool: int = 1) -> float:
    if not len(thresholds):
        raise ValueError("threshold list is empty")
    return nanmean_logged(
        (categorical_scores(contingency(pred, gt, t, pool))["csi"] for t in thresholds), "CSI-M"
    )


# -- continuous scores ------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(correlate1d(a, w, axis=-1, mode="constant"), w, axis=-2, mode="constant")
    return out[..., r:a.shape[-2] - r, r:a.shape[-1] - r]


def ssim_map(pred, gt, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every full Gaussian window position ("valid" region)."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: pred {x.shape} vs gt {y.shape}")
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"frame {x.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(y * y, w) - my * my
    sxy = _filter_valid(x * y, w) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Mean SSIM; leading axes of ``[..., H, W]`` inputs are averaged over."""
    return float(ssim_map(pred, gt, data_range).mean())


def crps_deterministic(pred, gt) -> float:
    """CRPS of a point forecast, i.e. the mean absolute error."""
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    return float(np.mean(np.abs(p - g)))


# -- dataset aggregation ----------------------------------------------------


@dataclass
class MetricReport:
    """Scores of one evaluation run.

    JSON keys: ``thresholds``, ``pools``, ``csi``/``pod``/``far`` as
    ``{pool: {threshold: value}}``, ``csi_m`` as ``{pool: value}``, ``hss``,
    ``hss_per_threshold``, ``ssim``, ``crps``, ``lead_time`` with
    ``threshold``/``csi``/``pod``/``far`` lists, ``counts`` as
    ``{pool: {threshold: [tp, fn, fp, tn]}}``, ``n_samples``, ``excluded``.
    Undefined scores are stored as ``null``.
    """

    thresholds: list
    pools: list
    csi: dict
    pod: dict
    far: dict
    csi_m: dict
    hss: float
    hss_per_threshold: dict
    ssim: float
    crps: float
    lead_time: dict
    counts: dict
    n_samples: int
    excluded: int = 0

    def to_dict(self) -> dict:
        return _nan_to_none({k: getattr(self, k) for k in self.__dataclass_fields__})

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = _none_to_nan(d)
        thr = {str(t): t for t in d["thresholds"]}

        def by_pool(m):
            return {int(k): {thr[t]: v for t, v in inner.items()} for k, inner in m.items()}

        d["csi"], d["pod"], d["far"], d["counts"] = (by_pool(d[k]) for k in ("csi", "pod", "far", "counts"))
        d["csi_m"] = {int(k): v for k, v in d["csi_m"].items()}
        d["hss_per_threshold"] = {thr[t]: v for t, v in d["hss_per_threshold"].items()}
        return cls(**d)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".partial")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _nan_to_none(o):
    if isinstance(o, dict):
        return {str(k): _nan_to_none(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_nan_to_none(v) for v in o]
    if isinstance(o, (float, np.floating)):
        return None if math.isnan(o) else float(o)
    if isinstance(o, np.integer):
        return int(o)
    return o


def _none_to_nan(o):
    if isinstance(o, dict):
        return {k: _none_to_nan(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_none_to_nan(v) for v in o]
    return math.nan if o is None else o


@dataclass
class MetricAccumulator:
    """Running sums for micro-averaged evaluation; ``merge`` is associative."""

    thresholds: tuple
    pools: tuple = (1, 4, 16)
    lead_threshold: float | None = None
    by_lead: dict = field(default_factory=dict)  # (threshold, pool) -> int64 [T, 4]
    ssim_sum: float = 0.0
    ssim_frames: int = 0
    abs_err_sum: float = 0.0
    n_values: int = 0
    n_samples: int = 0

    def __post_init__(self):
        self.thresholds = tuple(self.thresholds)
        self.pools = tuple(self.pools)
        if not self.thresholds:
            raise ValueError("threshold list is empty")
        if self.lead_threshold is None:
            self.lead_threshold = self.thresholds[-1]

    def update(self, pred, gt) -> None:
        """Add one sample; ``pred`` and ``gt`` are normalized ``[T, H, W]``."""
        p = _as_thw(pred)
        g = _as_thw(gt)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
        p_raw, g_raw = p * 255.0, np.rint(g * 255.0)
        for t in set(self.thresholds) | {self.lead_threshold}:
            for k in self.pools:
                c = kernels.contingency_by_lead(p_raw, g_raw, float(t), int(k))
                key = (t, k)
                self.by_lead[key] = self.by_lead[key] + c if key in self.by_lead else c
        smap = ssim_map(p, g)
        self.ssim_sum += float(smap.mean(axis=(-2, -1)).sum())
        self.ssim_frames += p.shape[0]
        self.abs_err_sum += float(np.abs(p - g).sum())
        self.n_values += p.size
        self.n_samples += 1

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator(self.thresholds, self.pools, self.lead_threshold)
        for key in set(self.by_lead) | set(other.by_lead):
            a, b = self.by_lead.get(key), other.by_lead.get(key)
            out.by_lead[key] = a + b if a is not None and b is not None else (a if b is None else b).copy()
        out.ssim_sum = self.ssim_sum + other.ssim_sum
        out.ssim_frames = self.ssim_frames + other.ssim_frames
        out.abs_err_sum = self.abs_err_sum + other.abs_err_sum
        out.n_values = self.n_values + other.n_values
        out.n_samples = self.n_samples + other.n_samples
        return out

    def report(self) -> MetricReport:
        if not self.n_samples:
            raise ValueError("no samples were accumulated")
        csi, pod, far, counts, csi_m = {}, {}, {}, {}, {}
        excluded = 0
        for k in self.pools:
            csi[k], pod[k], far[k], counts[k] = {}, {}, {}, {}
            for t in self.thresholds:
                c = ContingencyCounts.from_array(self.by_lead[(t, k)].sum(axis=0))
                s = categorical_scores(c)
                csi[k][t], pod[k][t], far[k][t] = s["csi"], s["pod"], s["far"]
                counts[k][t] = c.as_list()
            vals = list(csi[k].values())
            excluded += sum(math.isnan(v) for v in vals)
            csi_m[k] = nanmean_logged(vals, f"CSI-M pool {k}")
        hss_t = {
            t: categorical_scores(ContingencyCounts.from_array(self.by_lead[(t, 1)].sum(axis=0)))["hss"]
            if 1 in self.pools else math.nan
            for t in self.thresholds
        }
        excluded += sum(math.isnan(v) for v in hss_t.values())
        lead_pool = 1 if 1 in self.pools else self.pools[0]
        per_lead = [categorical_scores(ContingencyCounts.from_array(row))
                    for row in self.by_lead[(self.lead_threshold, lead_pool)]]
        return MetricReport(
            thresholds=list(self.thresholds),
            pools=list(self.pools),
            csi=csi, pod=pod, far=far, csi_m=csi_m,
            hss=nanmean_logged(hss_t.values(), "HSS"),
            hss_per_threshold=hss_t,
            ssim=self.ssim_sum / self.ssim_frames,
            crps=self.abs_err_sum / self.n_values,
            lead_time={
                "threshold": self.lead_threshold,
                "pool": lead_pool,
                "csi": [s["csi"] for s in per_lead],
                "pod": [s["pod"] for s in per_lead],
                "far": [s["far"] for s in per_lead],
            },
            counts=counts,
            n_samples=self.n_samples,
            excluded=excluded,
        )


def default_pools(height: int, width: int, wanted=(1, 4, 16)) -> tuple:
    return tuple(k for k in wanted if height % k == 0 and width % k == 0)


def evaluate_dataset(model: Callable, dataset, spec, report_threshold_for_leadtime=None, *,
                     pools: Sequence[int] | None = None, batch_size: int = 16) -> MetricReport:
    """Score ``model`` on the first ``t_in + t_out`` frames of every sequence.

    ``model`` maps a float tensor ``[B, t_in, 1, H, W]`` in [0, 1] to
    ``[B, t_out, 1, H, W]``; a ``NowcastModel`` or any stub with that contract.
    """
    import torch

    seqs = list(dataset)
    if not seqs:
        raise ValueError("cannot evaluate an empty dataset")
    pools = tuple(pools) if pools is not None else default_pools(spec.height, spec.width)
    acc = MetricAccumulator(spec.thresholds, pools, report_threshold_for_leadtime)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(seqs), batch_size):
                chunk = seqs[i:i + batch_size]
                frames = np.stack([_frames01(s)[: spec.t_in + spec.t_out] for s in chunk])
                x = torch.from_numpy(frames[:, : spec.t_in, None].astype(np.float32))
                y_hat = model(x).squeeze(2).double().numpy()
                for pred, gt in zip(y_hat, frames[:, spec.t_in:]):
                    acc.update(pred, gt)
    finally:
        if was_training:
            model.train()
    return acc.report()


def evaluate_self(dataset, spec, report_threshold_for_leadtime=None, *, pools=None) -> MetricReport:
    """Ground truth scored against itself; every score sits at its perfect value."""
    pools = tuple(pools) if pools is not None else default_pools(spec.height, spec.width)
    acc = MetricAccumulator(spec.thresholds, pools, report_threshold_for_leadtime)
    for s in dataset:
        gt = _frames01(s)[spec.t_in: spec.t_in + spec.t_out]
        acc.update(gt, gt)
    return acc.report()


def _frames01(seq) -> np.ndarray:
    frames = getattr(seq, "frames", seq)
    frames = np.asarray(frames)
    if frames.dtype == np.uint8:
        return frames.astype(np.float64) / 255.0
    return frames.astype(np.float64)


def plot_lead_time(report: MetricReport, path, label: str = "model", interval_minutes: int = 5) -> Path:
    """Write a CSI / POD / FAR versus lead-time figure to ``path``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lt = report.lead_time
    lead = [(i + 1) * interval_minutes for i in range(len(lt["csi"]))]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key in zip(axes, ("csi", "pod", "far")):
        ax.plot(lead, lt[key], marker="o", label=label)
        ax.set_title(f"{key.upper()}-{lt['threshold']:g}")
        ax.set_xlabel("lead time (min)")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".partial" + path.suffix)
    fig.savefig(tmp, dpi=100)
    plt.close(fig)
    os.replace(tmp, path)
    return path

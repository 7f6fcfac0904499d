"""Radar sequence datasets: on-disk format, normalization, splitting and a
seeded synthetic storm generator.

Directory layout::

    <root>/manifest.json
    <root>/<id>.u8          # raw uint8 intensities, row-major [T, H, W]

The manifest holds ``format_version``, ``height``, ``width``,
``interval_minutes`` and ``sequences: [{id, t_total, file}]``. Augmented
datasets add ``boundary`` and ``teacher_checkpoint_hash``. Any other keys
written through ``extra`` are preserved on load in ``DatasetInfo.extra``.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"

SEVIR_THRESHOLDS = (16, 74, 133, 160, 181, 219)
HKO7_THRESHOLDS = (84, 118, 141, 158, 185)
METEONET_THRESHOLDS = (19, 28, 35, 40, 47)


class DatasetFormatError(ValueError):
    """The directory is not a readable dataset."""


class DatasetValidationError(ValueError):
    """A sequence violates the dataset contract."""


class ConfigError(ValueError):
    pass


@dataclass
class RadarSequence:
    id: str
    frames: np.ndarray  # uint8 [T_total, H, W]
    interval_minutes: int = 5

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 3:
            raise DatasetValidationError(f"sequence {self.id!r}: frames must be [T, H, W], got shape {frames.shape}")
        if frames.dtype != np.uint8:
            if np.issubdtype(frames.dtype, np.floating) and not np.all(np.isfinite(frames)):
                raise DatasetValidationError(f"sequence {self.id!r}: non-finite intensities")
            if frames.size and (frames.min() < 0 or frames.max() > 255):
                raise DatasetValidationError(f"sequence {self.id!r}: intensities outside [0, 255]")
            if not np.array_equal(frames, np.round(frames)):
                raise DatasetValidationError(f"sequence {self.id!r}: intensities must be integers")
            frames = frames.astype(np.uint8)
        if self.interval_minutes <= 0:
            raise DatasetValidationError(f"sequence {self.id!r}: interval_minutes must be positive")
        self.frames = frames

    @property
    def t_total(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class DatasetSpec:
    """Grid geometry, horizons and thresholds of a dataset.

    ``tau`` defaults to the largest threshold.
    """

    height: int = 64
    width: int = 64
    t_in: int = 13
    t_out: int = 12
    thresholds: tuple = SEVIR_THRESHOLDS
    tau: float | None = None
    interval_minutes: int = 5

    def __post_init__(self):
        self.thresholds = tuple(self.thresholds)
        if not self.thresholds:
            raise ConfigError("thresholds must be nonempty")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError(f"thresholds must be strictly increasing, got {self.thresholds}")
        if self.tau is None:
            self.tau = float(self.thresholds[-1])
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigError("t_in and t_out must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigError("height and width must be >= 1")

    @property
    def t_total(self) -> int:
        return self.t_in + self.t_out

    def validate(self, seq: RadarSequence) -> None:
        if seq.shape != (self.height, self.width):
            raise DatasetValidationError(
                f"sequence {seq.id!r}: grid {seq.shape} does not match spec {(self.height, self.width)}"
            )
        if seq.t_total < self.t_total:
            raise DatasetValidationError(
                f"sequence {seq.id!r}: {seq.t_total} frames < t_in + t_out = {self.t_total}"
            )


@dataclass
class DatasetInfo:
    height: int
    width: int
    interval_minutes: int
    boundary: int | None = None
    teacher_checkpoint_hash: str | None = None
    extra: dict = field(default_factory=dict)


# -- on-disk format ---------------------------------------------------------


def _read_manifest(path: Path) -> dict:
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise DatasetFormatError(f"{path}: no {MANIFEST}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: invalid JSON ({exc})") from exc
    for key in ("height", "width", "interval_minutes", "sequences"):
        if key not in manifest:
            raise DatasetFormatError(f"{mpath}: missing key {key!r}")
    version = manifest.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: format_version {version}, expected {FORMAT_VERSION}")
    return manifest


def read_info(path) -> DatasetInfo:
    m = _read_manifest(Path(path))
    known = {"format_version", "height", "width", "interval_minutes", "sequences", "boundary",
             "teacher_checkpoint_hash"}
    return DatasetInfo(
        height=int(m["height"]),
        width=int(m["width"]),
        interval_minutes=int(m["interval_minutes"]),
        boundary=m.get("boundary"),
        teacher_checkpoint_hash=m.get("teacher_checkpoint_hash"),
        extra={k: v for k, v in m.items() if k not in known},
    )


def load_dataset(path, spec: DatasetSpec | None = None) -> list[RadarSequence]:
    """Load every sequence listed in the manifest at ``path``.

    When ``spec`` is given each sequence is checked against its grid size and
    minimum length.
    """
    path = Path(path)
    manifest = _read_manifest(path)
    H, W = int(manifest["height"]), int(manifest["width"])
    interval = int(manifest["interval_minutes"])
    if spec is not None and (H, W) != (spec.height, spec.width):
        raise DatasetValidationError(f"{path}: manifest grid {(H, W)} does not match spec {(spec.height, spec.width)}")
    out = []
    for entry in manifest["sequences"]:
        fpath = path / entry["file"]
        if not fpath.is_file():
            raise DatasetFormatError(f"{path}: missing frame file {entry['file']!r} for sequence {entry['id']!r}")
        raw = np.fromfile(fpath, dtype="<u1")
        t = int(entry["t_total"])
        if raw.size != t * H * W:
            raise DatasetValidationError(
                f"sequence {entry['id']!r}: file holds {raw.size} values, manifest implies [{t}, {H}, {W}]"
            )
        seq = RadarSequence(entry["id"], raw.reshape(t, H, W), interval)
        if spec is not None:
            spec.validate(seq)
        out.append(seq)
    return out


def write_dataset(sequences: Sequence[RadarSequence], path, *, height: int | None = None,
                  width: int | None = None, interval_minutes: int | None = None,
                  boundary: int | None = None, teacher_checkpoint_hash: str | None = None,
                  extra: dict | None = None) -> None:
    """Write ``sequences`` to ``path``, replacing any previous dataset there.

    The dataset is staged in a sibling temporary directory and swapped in
    with renames, so a reader never sees a mix of old and new files.
    """
    path = Path(path)
    sequences = list(sequences)
    ids = [s.id for s in sequences]
    if len(set(ids)) != len(ids):
        raise DatasetValidationError("duplicate sequence ids")
    if sequences:
        shapes = {s.shape for s in sequences}
        if len(shapes) != 1:
            raise DatasetValidationError(f"sequences have differing grids: {sorted(shapes)}")
        H, W = shapes.pop()
        if (height is not None and height != H) or (width is not None and width != W):
            raise DatasetValidationError(f"declared grid {(height, width)} does not match sequences {(H, W)}")
        interval = interval_minutes or sequences[0].interval_minutes
    else:
        H, W = height or 0, width or 0
        interval = interval_minutes or 5

    manifest = {
        "format_version": FORMAT_VERSION,
        "height": H,
        "width": W,
        "interval_minutes": interval,
        "sequences": [],
    }
    if boundary is not None:
        manifest["boundary"] = int(boundary)
    if teacher_checkpoint_hash is not None:
        manifest["teacher_checkpoint_hash"] = teacher_checkpoint_hash
    if extra:
        manifest.update(extra)

    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.tmp-", dir=path.parent))
    try:
        for seq in sequences:
            fname = f"{_safe_name(seq.id)}.u8"
            np.ascontiguousarray(seq.frames, dtype="<u1").tofile(staging / fname)
            manifest["sequences"].append({"id": seq.id, "t_total": seq.t_total, "file": fname})
        (staging / MANIFEST).write_text(json.dumps(manifest, indent=1))
        backup = None
        if path.exists():
            backup = path.with_name(f".{path.name}.old-{os.getpid()}")
            os.replace(path, backup)
        os.replace(staging, path)
        if backup is not None:
            shutil.rmtree(backup, ignore_errors=True)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise


def _safe_name(seq_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in seq_id)


def load_sevir_h5(path, key: str = "vil", *, id_prefix: str | None = None,
                  interval_minutes: int = 5, limit: int | None = None) -> list[RadarSequence]:
    """Read a SEVIR-style archive holding ``[N, H, W, T]`` uint8 events.

    Accepts HDF5 (``key`` selects the dataset) or ``.npy``. Frames are
    transposed to ``[T, H, W]``; no cropping or resampling is applied.
    """
    path = Path(path)
    prefix = id_prefix if id_prefix is not None else path.stem
    if path.suffix == ".npy":
        data = np.load(path, mmap_mode="r")
    else:
        import h5py

        with h5py.File(path, "r") as f:
            data = f[key][: limit if limit is not None else None]
    if data.ndim != 4:
        raise DatasetFormatError(f"{path}: expected [N, H, W, T], got shape {data.shape}")
    n = data.shape[0] if limit is None else min(limit, data.shape[0])
    return [
        RadarSequence(f"{prefix}-{i:06d}", np.ascontiguousarray(np.transpose(data[i], (2, 0, 1))), interval_minutes)
        for i in range(n)
    ]


# -- normalization ----------------------------------------------------------


def normalize(frames) -> np.ndarray:
    """Map raw intensities 0..255 to float32 in [0, 1]."""
    if isinstance(frames, RadarSequence):
        frames = frames.frames
    return np.asarray(frames, dtype=np.float32) / np.float32(255.0)


def denormalize(values) -> np.ndarray:
    """Inverse of ``normalize``, rounded and clipped back to uint8."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# -- splitting --------------------------------------------------------------


def split(dataset: Sequence[RadarSequence], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Partition into disjoint (train, val, test) lists.

    Val and test sizes are ``floor(frac * n)``; the remainder goes to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be three nonnegative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    n = len(dataset)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    items = list(dataset)
    val = [items[i] for i in order[:n_val]]
    test = [items[i] for i in order[n_val:n_val + n_test]]
    train = [items[i] for i in order[n_val + n_test:]]
    return train, val, test


# -- synthetic generator ----------------------------------------------------


@dataclass
class SyntheticGenConfig:
    """Parameters of the advected-Gaussian-cell storm generator.

    Ranges are ``(low, high)`` pairs sampled uniformly per cell.
    """

    n_sequences: int = 100
    height: int = 64
    width: int = 64
    t_total: int = 25
    n_cells: tuple = (2, 5)
    velocity: tuple = (-1.5, 1.5)  # pixels per frame, per axis
    radius: tuple = (3.0, 8.0)  # initial Gaussian sigma in pixels
    diffusion: float = 0.05  # sigma**2 growth per frame
    growth: tuple = (-0.04, 0.03)  # log-intensity change per frame
    peak: tuple = (120.0, 255.0)
    background: float = 6.0  # amplitude of the smooth stratiform field
    interval_minutes: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("n_cells", "velocity", "radius", "growth", "peak"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"synthetic.{name}: low {lo} > high {hi}")
            setattr(self, name, (lo, hi))
        if self.n_cells[0] < 0 or self.radius[0] <= 0:
            raise ConfigError("synthetic.n_cells must be >= 0 and synthetic.radius > 0")
        if not (0 <= self.peak[0] and self.peak[1] <= 255):
            raise ConfigError("synthetic.peak must lie within [0, 255]")
        if self.n_sequences < 0 or self.t_total < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("synthetic: n_sequences >= 0, t_total >= 1, height/width >= 1 required")
        if self.diffusion < 0:
            raise ConfigError("synthetic.diffusion must be >= 0")


def _one_sequence(cfg: SyntheticGenConfig, rng: np.random.Generator) -> np.ndarray:
    H, W, T = cfg.height, cfg.width, cfg.t_total
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    n = int(rng.integers(cfg.n_cells[0], cfg.n_cells[1] + 1))
    # a shared steering flow plus per-cell jitter keeps motion coherent
    steer = rng.uniform(*cfg.velocity, size=2)
    field = np.zeros((T, H, W))
    for _ in range(n):
        v = steer + rng.normal(0.0, 0.25, size=2)
        y0 = rng.uniform(0, H) - v[0] * T / 2
        x0 = rng.uniform(0, W) - v[1] * T / 2
        s0 = rng.uniform(*cfg.radius)
        amp = rng.uniform(*cfg.peak)
        g = rng.uniform(*cfg.growth)
        t0 = rng.uniform(0, T)  # amp is reached at t0, growth/decay is exponential around it
        for t in range(T):
            s2 = s0 * s0 + cfg.diffusion * t
            a = amp * np.exp(g * (t - t0))
            field[t] += a * np.exp(-((yy - y0 - v[0] * t) ** 2 + (xx - x0 - v[1] * t) ** 2) / (2 * s2))
    if cfg.background > 0:
        base = gaussian_filter(rng.normal(size=(H, W)), sigma=max(H, W) / 8, mode="wrap")
        base = np.clip(base / (base.std() + 1e-12), 0, None) * cfg.background
        for t in range(T):
            shift = np.rint(steer * t).astype(int)
            field[t] += np.roll(base, tuple(shift), axis=(0, 1))
    return np.clip(np.rint(field), 0, 255).astype(np.uint8)


def generate_synthetic(config: SyntheticGenConfig) -> list[RadarSequence]:
    """Generate ``config.n_sequences`` seeded synthetic radar sequences."""
    rng = np.random.default_rng(config.rng_seed)
    return [
        RadarSequence(f"syn-{config.rng_seed}-{i:05d}", _one_sequence(config, rng), config.interval_minutes)
        for i in range(config.n_sequences)
    ]

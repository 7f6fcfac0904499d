"""Encoder / translator / decoder nowcasting network.

Frames are encoded independently, stacked along channels so the translator
sees ``T_in * hid_spatial`` channels, remapped to ``T_out * hid_spatial`` and
decoded independently. All ``T_out`` frames come out of one pass.

Checkpoint key scheme (``.npz``)::

    format_version          int64 scalar
    config                  uint8 bytes of the ModelConfig JSON
    param/<dotted.name>     float32 parameter arrays, torch naming
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input tensor does not satisfy the model's shape contract."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    t_in: int = 13
    t_out: int = 12
    hid_spatial: int = 64
    hid_temporal: int = 256
    n_spatial_blocks: int = 2
    n_temporal_blocks: int = 4
    inception_kernels: tuple = (3, 5, 7, 11)
    groups: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        self.inception_kernels = tuple(int(k) for k in self.inception_kernels)
        if self.t_in < 1 or self.t_out < 1:
            raise ValueError("t_in and t_out must be >= 1")
        if self.n_spatial_blocks < 1 or self.n_temporal_blocks < 1:
            raise ValueError("need at least one spatial and one temporal block")
        if any(k % 2 == 0 for k in self.inception_kernels):
            raise ValueError("inception kernels must be odd")

    @property
    def downsample(self) -> int:
        return 2 ** self.n_spatial_blocks

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _gn(channels: int, groups: int) -> nn.GroupNorm:
    g = groups
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


class ConvBlock(nn.Module):
    """3x3 conv, group norm, LeakyReLU; optional stride-2 down or 2x pixel-shuffle up."""

    def __init__(self, c_in, c_out, groups, *, down=False, up=False):
        super().__init__()
        self.up = up
        if up:
            self.conv = nn.Conv2d(c_in, c_out * 4, 3, padding=1)
            self.shuffle = nn.PixelShuffle(2)
        else:
            self.conv = nn.Conv2d(c_in, c_out, 3, stride=2 if down else 1, padding=1)
        self.norm = _gn(c_out, groups)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        x = self.conv(x)
        if self.up:
            x = self.shuffle(x)
        return self.act(self.norm(x))


class Encoder(nn.Module):
    def __init__(self, c_in, hid, n_blocks, groups):
        super().__init__()
        self.blocks = nn.ModuleList(
            ConvBlock(c_in if i == 0 else hid, hid, groups, down=True) for i in range(n_blocks)
        )

    def forward(self, x):
        skip = None
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i == 0:
                skip = x
        return x, skip


class Decoder(nn.Module):
    def __init__(self, hid, c_out, n_blocks, groups):
        super().__init__()
        self.blocks = nn.ModuleList(
            ConvBlock(2 * hid if i == n_blocks - 1 else hid, hid, groups, up=True) for i in range(n_blocks)
        )
        self.readout = nn.Conv2d(hid, c_out, 1)

    def forward(self, z, skip):
        for i, blk in enumerate(self.blocks):
            if i == len(self.blocks) - 1:
                z = torch.cat([z, skip], dim=1)
            z = blk(z)
        return self.readout(z)


class Inception(nn.Module):
    """1x1 reduce, parallel grouped convs of several kernel sizes, concat, 1x1 fuse."""

    def __init__(self, c_in, c_hid, c_out, kernels, groups):
        super().__init__()
        self.reduce = nn.Conv2d(c_in, c_hid, 1)
        g = groups if c_hid % groups == 0 else 1
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c_hid, c_hid, k, padding=k // 2, groups=g),
                _gn(c_hid, groups),
                nn.LeakyReLU(0.2),
            )
            for k in kernels
        )
        self.fuse = nn.Conv2d(c_hid * len(kernels), c_out, 1)

    def forward(self, x):
        x = self.reduce(x)
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class InceptionUNet(nn.Module):
    """Channel-space UNet of inception blocks followed by a 1x1 time remap.

    With ``n`` blocks, ``ceil(n/2)`` form the contracting side and ``floor(n/2)``
    the expanding side; every expanding block after the first concatenates the
    mirrored contracting output.
    """

    def __init__(self, c_in, c_out, hid, n_blocks, kernels, groups):
        super().__init__()
        n_enc = (n_blocks + 1) // 2
        n_dec = n_blocks // 2
        c_mid = max(hid // 2, 1)
        enc = []
        for i in range(n_enc):
            src = c_in if i == 0 else hid
            dst = c_in if (n_dec == 0 and i == n_enc - 1) else hid
            enc.append(Inception(src, c_mid, dst, kernels, groups))
        dec = []
        for j in range(n_dec):
            src = hid if j == 0 else 2 * hid
            dst = c_in if j == n_dec - 1 else hid
            dec.append(Inception(src, c_mid, dst, kernels, groups))
        self.enc = nn.ModuleList(enc)
        self.dec = nn.ModuleList(dec)
        self.remap = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        skips = []
        for blk in self.enc:
            x = blk(x)
            skips.append(x)
        if self.dec:
            x = self.dec[0](x)
            for j, blk in enumerate(self.dec[1:], start=1):
                x = blk(torch.cat([x, skips[-1 - j]], dim=1))
        return self.remap(x)


class NowcastModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = Encoder(1, c.hid_spatial, c.n_spatial_blocks, c.groups)
        self.translator = InceptionUNet(
            c.t_in * c.hid_spatial, c.t_out * c.hid_spatial, c.hid_temporal,
            c.n_temporal_blocks, c.inception_kernels, c.groups,
        )
        self.decoder = Decoder(c.hid_spatial, 1, c.n_spatial_blocks, c.groups)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- stages -------------------------------------------------------------

    def encode(self, frames: torch.Tensor):
        """``[N, 1, H, W]`` -> (latent ``[N, hid, H/d, W/d]``, skip ``[N, hid, H/2, W/2]``)."""
        d = self.config.downsample
        if frames.ndim != 4 or frames.shape[1] != 1:
            raise ShapeError(f"encode expects [N, 1, H, W], got {tuple(frames.shape)}")
        if frames.shape[2] % d or frames.shape[3] % d:
            raise ShapeError(f"H, W = {tuple(frames.shape[2:])} must be divisible by {d}")
        return self.encoder(frames)

    def translate(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, T_in*hid, h, w]`` -> ``[B, T_out*hid, h, w]``."""
        expect = self.config.t_in * self.config.hid_spatial
        if z.ndim != 4 or z.shape[1] != expect:
            raise ShapeError(f"translate expects [B, {expect}, h, w], got {tuple(z.shape)}")
        return self.translator(z)

    def decode(self, z: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        """``[N, hid, h, w]`` plus encoder skip ``[N, hid, 2^(k-1) h, ...]`` -> ``[N, 1, H, W]``."""
        hid = self.config.hid_spatial
        if z.ndim != 4 or z.shape[1] != hid:
            raise ShapeError(f"decode expects [N, {hid}, h, w], got {tuple(z.shape)}")
        scale = 2 ** (self.config.n_spatial_blocks - 1)
        want = (z.shape[0], hid, z.shape[2] * scale, z.shape[3] * scale)
        if tuple(skip.shape) != want:
            raise ShapeError(f"decode skip must be {want}, got {tuple(skip.shape)}")
        return self.decoder(z, skip)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c = self.config
        if x.ndim != 5 or x.shape[1] != c.t_in or x.shape[2] != 1:
            raise ShapeError(f"forward expects [B, {c.t_in}, 1, H, W], got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite values in model input")
        bad = [n for n, p in self.named_parameters() if not torch.isfinite(p).all()]
        if bad:
            raise FloatingPointError(f"non-finite parameters: {bad[:5]}")
        B, T, _, H, W = x.shape
        z, skip = self.encode(x.reshape(B * T, 1, H, W))
        _, C, h, w = z.shape
        z = self.translate(z.reshape(B, T * C, h, w))
        z = z.reshape(B * c.t_out, C, h, w)
        # every output frame is decoded against the skip of the newest input frame
        skip = skip.reshape(B, T, *skip.shape[1:])[:, -1]
        skip = skip.unsqueeze(1).expand(B, c.t_out, *skip.shape[1:]).reshape(B * c.t_out, *skip.shape[1:])
        y = self.decode(z, skip)
        return y.reshape(B, c.t_out, 1, H, W).clamp(0.0, 1.0)


def init_model(config: ModelConfig) -> NowcastModel:
    """Build a model whose initial weights depend only on ``config.rng_seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(config.rng_seed)
        model = NowcastModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


@torch.no_grad()
def predict(model: NowcastModel, x) -> np.ndarray:
    """Run a forward pass on numpy input ``[B, T_in, H, W]`` in [0, 1]."""
    xt = torch.as_tensor(np.asarray(x, dtype=np.float32)).unsqueeze(2)
    return model(xt).squeeze(2).numpy()


# -- checkpoint format ------------------------------------------------------


def state_arrays(model: NowcastModel) -> dict:
    return {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def parameter_hash(model: NowcastModel) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def pack_model(model: NowcastModel, extra: dict | None = None) -> dict:
    arrays = state_arrays(model)
    arrays["format_version"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    arrays["config"] = np.frombuffer(json.dumps(asdict(model.config)).encode(), dtype=np.uint8)
    arrays["param_sha256"] = np.frombuffer(parameter_hash(model).encode(), dtype=np.uint8)
    if extra:
        arrays.update(extra)
    return arrays


def unpack_model(arrays) -> NowcastModel:
    version = int(arrays["format_version"])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    config = ModelConfig.from_dict(json.loads(bytes(arrays["config"]).decode()))
    model = NowcastModel(config)
    state = {k[len("param/"):]: torch.from_numpy(np.array(arrays[k])) for k in arrays if k.startswith("param/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    model.load_state_dict(state, strict=True)
    if "param_sha256" in arrays and bytes(arrays["param_sha256"]).decode() != parameter_hash(model):
        raise CheckpointError("parameter checksum mismatch; checkpoint is corrupted")
    return model


def read_npz(path) -> dict:
    """Read an entire ``.npz`` archive into memory, mapping any damage to ``CheckpointError``."""
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, OSError, ValueError, EOFError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc


def write_npz(path, arrays: dict) -> None:
    """Write an ``.npz`` under a temporary name and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def save_model(model: NowcastModel, path) -> None:
    write_npz(path, pack_model(model))


def load_model(path) -> NowcastModel:
    return unpack_model(read_npz(path))

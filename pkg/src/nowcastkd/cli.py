"""Command-line pipeline: data generation, three-step training, evaluation.

Configuration is one YAML (or JSON) file with the sections ``data``,
``synthetic``, ``model``, ``loss``, ``distill``, ``train`` and ``paths``.
Keys are the fields of the matching config classes; see README for the
full list. Layers are merged in this order, later wins::

    built-in defaults < --profile < --config < --set section.key=value < flags

Everything is validated (unknown keys included) before any command runs.

Run directory (``$NOWCASTKD_RUN_ROOT`` or ``paths.run_root``, then
``paths.run_name``; ``--run-dir`` overrides both)::

    data/{train,val,test}/    gen-data
    teacher/, teacher.npz     train-short
    augmented/                augment
    student/, student.npz     train-long
    baseline/, baseline.npz   run-all (direct long-horizon training)
    eval/<name>/              report.json, lead_time.png
    results.json              run-all comparison table
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import shutil
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import torch
import yaml

from .distill import (
    DistillConfig,
    augment_dataset,
    load_augmented,
    train_direct,
    train_long,
    train_short,
)
from .loss import LossConfig
from .metrics import MetricReport, default_pools, evaluate_dataset, evaluate_self, plot_lead_time
from .model import CheckpointError, ModelConfig, NowcastModel, load_model, parameter_hash, save_model
from .radar_data import (
    SEVIR_THRESHOLDS,
    ConfigError,
    DatasetFormatError,
    DatasetSpec,
    SyntheticGenConfig,
    generate_synthetic,
    load_dataset,
    load_sevir_h5,
    split,
    write_dataset,
)
from .trainer import TrainConfig, TrainingError

logger = logging.getLogger("nowcastkd")

RUN_ROOT_ENV = "NOWCASTKD_RUN_ROOT"
PROFILES = ("smoke", "desk", "sevir")


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    thresholds: tuple = SEVIR_THRESHOLDS
    interval_minutes: int = 5
    fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    source: str = "synthetic"  # or "file" (SEVIR-style .h5 / .npy, see data.path)
    path: str | None = None
    key: str = "vil"
    limit: int | None = None
    pools: tuple | None = None  # default: those of 1, 4, 16 dividing the grid
    lead_threshold: float | None = None  # default: top threshold

    def __post_init__(self):
        self.thresholds = tuple(self.thresholds)
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"data.fractions must be three nonnegative numbers, got {list(self.fractions)}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"data.fractions must sum to 1, got {sum(self.fractions)!r}")
        if self.source not in ("synthetic", "file"):
            raise ConfigError(f"data.source must be 'synthetic' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ConfigError("data.path is required when data.source is 'file'")
        if self.pools is not None:
            self.pools = tuple(int(k) for k in self.pools)
            bad = [k for k in self.pools if k < 1 or self.height % k or self.width % k]
            if bad:
                raise ConfigError(f"data.pools {bad} do not divide the {self.height}x{self.width} grid")


@dataclass
class PathsConfig:
    run_root: str = "runs"
    run_name: str = "default"
    run_dir: str | None = None


# section -> (class, keys owned by another section and therefore not settable here)
SECTIONS = {
    "data": (DataConfig, ()),
    "synthetic": (SyntheticGenConfig, ("height", "width", "t_total", "interval_minutes")),
    "model": (ModelConfig, ("t_in", "t_out")),
    "loss": (LossConfig, ()),
    "distill": (DistillConfig, ()),
    "train": (TrainConfig, ()),
    "paths": (PathsConfig, ()),
}


def section_keys(section: str) -> list[str]:
    cls, skip = SECTIONS[section]
    return [f.name for f in fields(cls) if f.name not in skip]


@dataclass
class RunConfig:
    data: DataConfig
    synthetic: SyntheticGenConfig
    model: ModelConfig
    loss: LossConfig
    distill: DistillConfig
    train: TrainConfig
    paths: PathsConfig
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def spec(self) -> DatasetSpec:
        d, dc = self.data, self.distill
        return DatasetSpec(height=d.height, width=d.width, t_in=dc.t_in, t_out=dc.t_long,
                           thresholds=d.thresholds, interval_minutes=d.interval_minutes)

    @property
    def run_dir(self) -> Path:
        if self.paths.run_dir:
            return Path(self.paths.run_dir)
        return Path(os.environ.get(RUN_ROOT_ENV) or self.paths.run_root) / self.paths.run_name

    @property
    def pools(self) -> tuple:
        return self.data.pools or default_pools(self.data.height, self.data.width)

    @property
    def lead_threshold(self) -> float:
        return self.data.lead_threshold if self.data.lead_threshold is not None else max(self.data.thresholds)

    def snapshot(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items() if k in section_keys(name)}
        return out


# -- loading ----------------------------------------------------------------


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-8`` (no dot) as a float, as JSON does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"""),
    list("-+0123456789"),
)


def _read_mapping(text: str, origin: str) -> dict:
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{origin}: cannot parse ({exc})") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{origin}: top level must be a mapping of sections")
    return doc


def load_profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    text = resources.files("nowcastkd").joinpath("profiles", f"{name}.yaml").read_text()
    return _read_mapping(text, f"profile {name}")


def _merge(base: dict, layer: dict, origin: str) -> None:
    for section, values in layer.items():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section {section!r}")
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        allowed = section_keys(section)
        for key, value in values.items():
            if key not in allowed:
                raise ConfigError(f"{origin}: unknown key '{section}.{key}'")
            base.setdefault(section, {})[key] = value


def parse_override(item: str) -> dict:
    """``section.key=value`` with a YAML-parsed value, as a one-key layer."""
    name, sep, value = item.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    try:
        parsed = yaml.load(value, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"--set {name}: cannot parse value {value!r}") from exc
    return {section: {key: parsed}}


def build_config(raw: dict) -> RunConfig:
    """Construct and cross-check every section; errors name the offending key."""
    built = {}
    # synthetic and loss defaults depend on data and distill
    for section in ("data", "distill", "synthetic", "model", "loss", "train", "paths"):
        values = dict(raw.get(section, {}))
        if section == "synthetic":
            d, dc = built["data"], built["distill"]
            values.update(height=d.height, width=d.width, t_total=dc.t_in + dc.t_long,
                          interval_minutes=d.interval_minutes)
        if section == "loss" and values.get("tau") is None:
            values["tau"] = float(max(built["data"].thresholds))
        try:
            built[section] = SECTIONS[section][0](**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    cfg = RunConfig(raw=raw, **built)
    _check_model(cfg)
    return cfg


def _check_model(cfg: RunConfig) -> None:
    d, m = cfg.data, cfg.model
    if d.height % m.downsample or d.width % m.downsample:
        raise ConfigError(
            f"data.height/width ({d.height}x{d.width}) must be divisible by 2**model.n_spatial_blocks = {m.downsample}"
        )
    mc = replace(m, t_in=cfg.distill.t_in, t_out=cfg.distill.t_long)
    try:
        model = NowcastModel(mc).eval()
        side = 2 * m.downsample
        with torch.no_grad():
            model(torch.zeros(1, mc.t_in, 1, side, side))
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(f"model: configuration cannot be instantiated ({exc})") from exc


def load_config(config_path=None, profile=None, overrides=(), flags=None) -> RunConfig:
    raw: dict = {}
    if profile:
        _merge(raw, load_profile(profile), f"profile {profile}")
    if config_path:
        p = Path(config_path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc.strerror}") from exc
        _merge(raw, _read_mapping(text, str(p)), str(p))
    for item in overrides:
        _merge(raw, parse_override(item), "--set")
    _merge(raw, flags or {}, "flag")
    return build_config(raw)


# -- commands ---------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(json.dumps(obj, indent=1))
    os.replace(tmp, path)


def _stage_dir(cfg: RunConfig, name: str, resume: bool) -> Path:
    d = cfg.run_dir / name
    if not resume:
        shutil.rmtree(d / "checkpoints", ignore_errors=True)
        (d / "history.jsonl").unlink(missing_ok=True)
    d.mkdir(parents=True, exist_ok=True)
    _write_json(d / "config.json", cfg.snapshot())
    return d


def _load_split(cfg: RunConfig, data_dir, name: str, t_out: int | None = None):
    spec = cfg.spec if t_out is None else replace(cfg.spec, t_out=t_out)
    return load_dataset(Path(data_dir) / name, spec)


def cmd_gen_data(cfg: RunConfig, out=None) -> Path:
    d = cfg.data
    out = Path(out) if out else cfg.run_dir / "data"
    if d.source == "synthetic":
        seqs = generate_synthetic(cfg.synthetic)
    else:
        seqs = load_sevir_h5(d.path, d.key, interval_minutes=d.interval_minutes, limit=d.limit)
    for s in seqs:
        cfg.spec.validate(s)
    parts = split(seqs, d.fractions, seed=d.split_seed)
    staging = out.with_name(out.name + ".partial")
    shutil.rmtree(staging, ignore_errors=True)
    for name, part in zip(("train", "val", "test"), parts):
        write_dataset(part, staging / name, height=d.height, width=d.width, interval_minutes=d.interval_minutes)
    if out.exists():
        shutil.rmtree(out)
    os.replace(staging, out)
    heavy = sum(int((s.frames > cfg.loss.tau).any()) for s in seqs)
    print(f"wrote {out}: train {len(parts[0])}, val {len(parts[1])}, test {len(parts[2])} sequences; "
          f"{heavy}/{len(seqs)} exceed {cfg.loss.tau:g}")
    return out


def _save_best(model, path: Path, label: str) -> Path:
    save_model(model, path)
    print(f"{label}: {path} (sha256 {parameter_hash(model)[:12]})")
    return path


def cmd_train_short(cfg: RunConfig, data_dir=None, resume=False) -> Path:
    data_dir = Path(data_dir) if data_dir else cfg.run_dir / "data"
    tr = _load_split(cfg, data_dir, "train")
    va = _load_split(cfg, data_dir, "val")
    stage = _stage_dir(cfg, "teacher", resume)
    model, hist = train_short(tr, va, cfg.model, cfg.distill, cfg.train, cfg.loss, cfg.data.thresholds,
                              run_dir=stage, resume=resume)
    logger.info("teacher selected at epoch %s", hist.selected_epoch)
    return _save_best(model, cfg.run_dir / "teacher.npz", "teacher")


def cmd_augment(cfg: RunConfig, teacher_path=None, data_dir=None, out=None) -> Path:
    teacher_path = Path(teacher_path) if teacher_path else cfg.run_dir / "teacher.npz"
    data_dir = Path(data_dir) if data_dir else cfg.run_dir / "data"
    out = Path(out) if out else cfg.run_dir / "augmented"
    teacher = load_model(teacher_path)
    tr = _load_split(cfg, data_dir, "train")
    aug = augment_dataset(teacher, tr, cfg.distill, path=out)
    print(f"wrote {out}: {len(aug)} sequences of length {cfg.distill.augmented_length}, "
          f"boundary {cfg.distill.source_length}")
    return out


def cmd_train_long(cfg: RunConfig, augmented=None, data_dir=None, teacher_path=None, resume=False) -> Path:
    augmented = Path(augmented) if augmented else cfg.run_dir / "augmented"
    data_dir = Path(data_dir) if data_dir else cfg.run_dir / "data"
    teacher_path = Path(teacher_path) if teacher_path else cfg.run_dir / "teacher.npz"
    expected = parameter_hash(load_model(teacher_path)) if teacher_path.exists() else None
    aug = load_augmented(augmented, expected_teacher_hash=expected)
    va = _load_split(cfg, data_dir, "val")
    stage = _stage_dir(cfg, "student", resume)
    model, hist = train_long(aug, va, cfg.model, cfg.distill, cfg.train, cfg.loss, cfg.data.thresholds,
                             run_dir=stage, resume=resume)
    logger.info("student selected at epoch %s", hist.selected_epoch)
    return _save_best(model, cfg.run_dir / "student.npz", "student")


def cmd_train_baseline(cfg: RunConfig, data_dir=None, resume=False) -> Path:
    data_dir = Path(data_dir) if data_dir else cfg.run_dir / "data"
    tr = _load_split(cfg, data_dir, "train")
    va = _load_split(cfg, data_dir, "val")
    stage = _stage_dir(cfg, "baseline", resume)
    model, _ = train_direct(tr, va, cfg.model, cfg.distill, cfg.train, cfg.loss, cfg.data.thresholds,
                            run_dir=stage, resume=resume)
    return _save_best(model, cfg.run_dir / "baseline.npz", "baseline")


def cmd_eval(cfg: RunConfig, checkpoint=None, dataset=None, self_check=False, out=None,
             name=None) -> MetricReport:
    dataset = Path(dataset) if dataset else cfg.run_dir / "data" / "test"
    if self_check:
        spec = cfg.spec
        seqs = load_dataset(dataset, spec)
        report = evaluate_self(seqs, spec, cfg.lead_threshold, pools=cfg.pools)
        name = name or "self-check"
    else:
        checkpoint = Path(checkpoint) if checkpoint else cfg.run_dir / "student.npz"
        model = load_model(checkpoint)
        spec = replace(cfg.spec, t_in=model.config.t_in, t_out=model.config.t_out)
        seqs = load_dataset(dataset, spec)
        report = evaluate_dataset(model, seqs, spec, cfg.lead_threshold, pools=cfg.pools)
        name = name or checkpoint.stem
    out = Path(out) if out else cfg.run_dir / "eval" / name
    report.save(out / "report.json")
    plot_lead_time(report, out / "lead_time.png", label=name, interval_minutes=cfg.data.interval_minutes)
    print(f"{name}: " + "  ".join(f"CSI-M(p{k}) {v:.4f}" for k, v in report.csi_m.items())
          + f"  SSIM {report.ssim:.4f}  CRPS {report.crps:.5f}  -> {out}")
    return report


class StageError(RuntimeError):
    pass


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(f"stage {name} failed: {exc}") from exc


def format_table(rows: dict, pools) -> str:
    head = f"{'model':<10}" + "".join(f"  CSI-M(p{k})" for k in pools)
    lines = [head]
    for label, csi_m in rows.items():
        lines.append(f"{label:<10}" + "".join(f"  {csi_m[k]:>10.4f}" for k in pools))
    return "\n".join(lines)


def cmd_run_all(cfg: RunConfig, skip_baseline=False, resume=False) -> dict:
    _stage("gen-data", cmd_gen_data, cfg)
    _stage("train-short", cmd_train_short, cfg, resume=resume)
    _stage("augment", cmd_augment, cfg)
    _stage("train-long", cmd_train_long, cfg, resume=resume)
    rows = {}
    if not skip_baseline:
        _stage("train-baseline", cmd_train_baseline, cfg, resume=resume)
        rows["baseline"] = _stage("eval", cmd_eval, cfg, checkpoint=cfg.run_dir / "baseline.npz").csi_m
    rows["kd"] = _stage("eval", cmd_eval, cfg, checkpoint=cfg.run_dir / "student.npz").csi_m
    table = format_table(rows, cfg.pools)
    print(table)
    _write_json(cfg.run_dir / "results.json", {k: {str(p): v for p, v in r.items()} for k, r in rows.items()})
    return rows


# -- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--profile", choices=PROFILES, help="built-in base configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--run-dir", help="run directory (overrides paths.*)")
    common.add_argument("--seed", type=int, help="seed for model init, training and distillation")
    common.add_argument("--epochs", type=int, help="train.max_epochs")
    common.add_argument("--w-max", type=float, help="loss.w_max")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nowcastkd", description="Radar nowcasting with horizon distillation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate and split a synthetic dataset")
    s.add_argument("--out")

    s = sub.add_parser("train-short", parents=[common], help="train the short-horizon teacher")
    s.add_argument("--data")
    s.add_argument("--resume", action="store_true")

    s = sub.add_parser("augment", parents=[common], help="append teacher rollouts to the training set")
    s.add_argument("--teacher")
    s.add_argument("--data")
    s.add_argument("--out")

    s = sub.add_parser("train-long", parents=[common], help="train the long-horizon student")
    s.add_argument("--augmented")
    s.add_argument("--data")
    s.add_argument("--teacher", help="teacher checkpoint to compare with the augmented manifest")
    s.add_argument("--resume", action="store_true")

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint and plot lead-time curves")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--self-check", action="store_true", help="score ground truth against itself")
    s.add_argument("--out")
    s.add_argument("--name")

    s = sub.add_parser("run-all", parents=[common], help="full pipeline plus baseline comparison")
    s.add_argument("--skip-baseline", action="store_true")
    s.add_argument("--resume", action="store_true")
    return p


def _flag_layer(args) -> dict:
    layer: dict = {}
    if args.run_dir:
        layer.setdefault("paths", {})["run_dir"] = args.run_dir
    if args.seed is not None:
        for section, key in (("train", "seed"), ("model", "rng_seed"), ("distill", "rng_seed")):
            layer.setdefault(section, {})[key] = args.seed
    if args.epochs is not None:
        layer.setdefault("train", {})["max_epochs"] = args.epochs
    if args.w_max is not None:
        layer.setdefault("loss", {})["w_max"] = args.w_max
    return layer


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.profile, args.set, _flag_layer(args))
    except ConfigError as exc:
        print(f"nowcastkd: config error: {exc}", file=sys.stderr)
        return 2
    try:
        c = args.command
        if c == "gen-data":
            cmd_gen_data(cfg, args.out)
        elif c == "train-short":
            cmd_train_short(cfg, args.data, args.resume)
        elif c == "augment":
            cmd_augment(cfg, args.teacher, args.data, args.out)
        elif c == "train-long":
            cmd_train_long(cfg, args.augmented, args.data, args.teacher, args.resume)
        elif c == "eval":
            cmd_eval(cfg, args.checkpoint, args.dataset, args.self_check, args.out, args.name)
        elif c == "run-all":
            cmd_run_all(cfg, args.skip_baseline, args.resume)
    except ConfigError as exc:
        print(f"nowcastkd {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (StageError, TrainingError, CheckpointError, DatasetFormatError, ValueError, OSError) as exc:
        print(f"nowcastkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

import math

import numpy as np
import pytest
import torch

from nowcastkd.distill import make_sampler
from nowcastkd.loss import LossConfig, weighted_mse_torch
from nowcastkd.model import CheckpointError, ModelConfig, init_model, read_npz, write_npz
from nowcastkd.radar_data import SyntheticGenConfig, generate_synthetic, normalize
from nowcastkd.trainer import (
    TrainConfig,
    TrainingError,
    ValidationSet,
    load_checkpoint,
    save_checkpoint,
    train,
)

THR = (16, 74, 133, 160, 181, 219)


@pytest.fixture(scope="module")
def tiny_data():
    seqs = generate_synthetic(SyntheticGenConfig(n_sequences=24, height=16, width=16, t_total=10,
                                                 radius=(2, 4), velocity=(-0.8, 0.8), rng_seed=5))
    frames = [normalize(s.frames) for s in seqs]
    return frames[:16], ValidationSet.from_frames(frames[16:], 4, 3, THR)


def tiny_model(seed=0):
    return init_model(ModelConfig(t_in=4, t_out=3, hid_spatial=8, hid_temporal=16, rng_seed=seed))


def _params(m):
    return [p.detach().clone() for p in m.parameters()]


def test_deterministic_repeat(tiny_data):
    tr, val = tiny_data
    cfg = TrainConfig(max_epochs=1, batch_size=4, seed=3)
    outs = []
    for _ in range(2):
        m = tiny_model()
        train(m, tr, val, make_sampler(4, 3), LossConfig(), cfg)
        outs.append(_params(m))
    assert all(torch.equal(a, b) for a, b in zip(*outs))


def test_zero_learning_rate_keeps_parameters(tiny_data):
    tr, val = tiny_data
    m = tiny_model()
    before = _params(m)
    train(m, tr, val, make_sampler(4, 3), LossConfig(), TrainConfig(max_epochs=1, batch_size=4, learning_rate=0))
    assert all(torch.equal(a, b) for a, b in zip(before, _params(m)))


def test_loss_decreases_and_best_selected(tiny_data, tmp_path):
    tr, val = tiny_data
    m = tiny_model()
    best, hist = train(m, tr, val, make_sampler(4, 3), LossConfig(),
                       TrainConfig(max_epochs=20, batch_size=4, seed=1), run_dir=tmp_path)
    assert len(hist.train_loss) == len(hist.val_loss) == len(hist.val_csi_m) == len(hist.wall_time) == 20
    assert hist.train_loss[-1] < hist.train_loss[0]
    vals = [v if not math.isnan(v) else -math.inf for v in hist.val_csi_m]
    assert hist.val_csi_m[hist.selected_epoch] == max(vals)
    assert len((tmp_path / "history.jsonl").read_text().splitlines()) == 20
    ck = load_checkpoint(tmp_path / "checkpoints" / "best.npz")
    assert all(torch.equal(a, b) for a, b in zip(ck.model.parameters(), best.parameters()))


def test_single_small_step_decreases_batch_loss(tiny_data):
    tr, _ = tiny_data
    m = tiny_model()
    x = torch.from_numpy(np.stack([f[:4] for f in tr[:8]])).unsqueeze(2)
    y = torch.from_numpy(np.stack([f[4:7] for f in tr[:8]])).unsqueeze(2)
    cfg = LossConfig()
    before = weighted_mse_torch(m(x), y, cfg)
    opt = torch.optim.Adam(m.parameters(), lr=1e-4)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = weighted_mse_torch(m(x), y, cfg)
    assert after.item() < before.item()


def test_resume_matches_straight_run(tiny_data, tmp_path):
    tr, val = tiny_data
    cfg = TrainConfig(max_epochs=4, batch_size=4, seed=2)
    straight = tiny_model()
    best_a, hist_a = train(straight, tr, val, make_sampler(4, 3), LossConfig(), cfg, run_dir=tmp_path / "a")

    part = tiny_model()
    train(part, tr, val, make_sampler(4, 3), LossConfig(), TrainConfig(max_epochs=2, batch_size=4, seed=2),
          run_dir=tmp_path / "b")
    fresh = tiny_model(seed=99)  # resume must overwrite these weights
    best_b, hist_b = train(fresh, tr, val, make_sampler(4, 3), LossConfig(), cfg, run_dir=tmp_path / "b",
                           resume=True)
    assert all(torch.equal(a, b) for a, b in zip(straight.parameters(), fresh.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(best_a.parameters(), best_b.parameters()))
    assert hist_a.train_loss == hist_b.train_loss
    assert hist_a.selected_epoch == hist_b.selected_epoch


def test_checkpoint_round_trip_and_errors(tiny_data, tmp_path):
    tr, val = tiny_data
    m = tiny_model()
    opt = torch.optim.Adam(m.parameters(), lr=1e-3)
    weighted_mse_torch(m(torch.rand(2, 4, 1, 16, 16)), torch.rand(2, 3, 1, 16, 16), LossConfig()).backward()
    opt.step()
    save_checkpoint(m, opt, None, tmp_path / "c.npz", epoch=3)
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.epoch == 3
    x = torch.rand(2, 4, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(ck.model(x), m(x))
    opt2 = torch.optim.Adam(ck.model.parameters(), lr=1e-3)
    opt2.load_state_dict(ck.optimizer_state)
    for (_, a), (_, b) in zip(opt.state_dict()["state"].items(), opt2.state_dict()["state"].items()):
        assert torch.equal(a["exp_avg"], b["exp_avg"])

    data = (tmp_path / "c.npz").read_bytes()
    (tmp_path / "trunc.npz").write_bytes(data[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.npz")

    arrays = read_npz(tmp_path / "c.npz")
    arrays["format_version"] = np.array(7)
    write_npz(tmp_path / "v7.npz", arrays)
    with pytest.raises(CheckpointError, match="version 7, expected 1"):
        load_checkpoint(tmp_path / "v7.npz")

    arrays = read_npz(tmp_path / "c.npz")
    key = next(k for k in arrays if k.startswith("param/"))
    arrays[key] = arrays[key] + 1
    write_npz(tmp_path / "tampered.npz", arrays)
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "tampered.npz")


def test_non_finite_loss_aborts(tiny_data):
    tr, val = tiny_data
    bad = [f.copy() for f in tr]
    bad[3][5, 0, 0] = np.inf  # a target frame; inputs stay finite
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(tiny_model(), bad, val, lambda f, rng: (f[:4], f[4:7], 0), LossConfig(),
              TrainConfig(max_epochs=1, batch_size=4))


def test_onecycle_schedule_runs(tiny_data):
    tr, val = tiny_data
    _, hist = train(tiny_model(), tr, val, make_sampler(4, 3), LossConfig(),
                    TrainConfig(max_epochs=2, batch_size=8, schedule="onecycle"))
    assert all(math.isfinite(v) for v in hist.train_loss)

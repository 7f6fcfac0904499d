import numpy as np
import pytest
import torch
from scipy import stats

from nowcastkd.distill import (
    DistillConfig,
    augment_dataset,
    load_augmented,
    rollout,
    sample_subsequence,
)
from nowcastkd.model import ModelConfig, init_model, parameter_hash
from nowcastkd.radar_data import ConfigError, RadarSequence, normalize


class CountingStub(torch.nn.Module):
    """Repeats the newest input frame; counts calls."""

    def __init__(self, t_in, t_out):
        super().__init__()
        self.config = ModelConfig(t_in=t_in, t_out=t_out, hid_spatial=8, hid_temporal=8)
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return x[:, -1:].repeat(1, self.config.t_out, 1, 1, 1)


def _seqs(n, t=25, hw=16, seed=0):
    rng = np.random.default_rng(seed)
    return [RadarSequence(f"q{i}", rng.integers(0, 256, (t, hw, hw), dtype=np.uint8)) for i in range(n)]


def test_rollout_call_counts_and_truncation():
    frames = np.random.default_rng(0).random((13, 8, 8)).astype(np.float32)
    stub = CountingStub(13, 6)
    assert rollout(stub, frames, 12).shape == (12, 8, 8) and stub.calls == 2
    stub = CountingStub(13, 6)
    assert rollout(stub, frames, 7).shape == (7, 8, 8) and stub.calls == 2
    stub = CountingStub(13, 6)
    rollout(stub, frames, 6)
    assert stub.calls == 1
    with pytest.raises(ValueError):
        rollout(stub, frames[:5], 6)


def test_rollout_single_step_is_one_shot_forward():
    teacher = init_model(ModelConfig(t_in=4, t_out=3, hid_spatial=8, hid_temporal=8, rng_seed=1))
    frames = np.random.default_rng(1).random((9, 16, 16)).astype(np.float32)
    with torch.no_grad():
        direct = teacher(torch.from_numpy(frames[-4:])[None, :, None]).squeeze(2)[0].numpy()
    np.testing.assert_array_equal(rollout(teacher, frames, 3), direct)


def test_rollout_equals_chained_calls():
    teacher = init_model(ModelConfig(t_in=4, t_out=3, hid_spatial=8, hid_temporal=8, rng_seed=2))
    frames = np.random.default_rng(2).random((6, 16, 16)).astype(np.float32)
    seq = torch.from_numpy(frames)
    with torch.no_grad():
        for _ in range(2):
            step = teacher(seq[-4:][None, :, None]).squeeze(2)[0]
            seq = torch.cat([seq, step])
    np.testing.assert_array_equal(rollout(teacher, frames, 6), seq[6:].numpy())
    # batched rollout agrees with per-sequence rollout
    batch = np.stack([frames, frames[::-1].copy()])
    out = rollout(teacher, batch, 5)
    np.testing.assert_allclose(out[1], rollout(teacher, batch[1], 5), rtol=1e-5, atol=1e-6)


def test_distill_config():
    c = DistillConfig()
    assert (c.t_short, c.rollout_steps, c.augmented_length, c.source_length) == (6, 2, 37, 25)
    with pytest.raises(ConfigError):
        DistillConfig(t_long=12, t_short=4, rollout_steps=2)
    assert DistillConfig(t_long=12, t_short=4, rollout_steps=3).t_short == 4


def test_augment_sevir_shape_and_boundary():
    cfg = DistillConfig(t_in=13, t_long=12)
    stub = CountingStub(13, 6)
    data = _seqs(3, t=27)
    aug = augment_dataset(stub, data, cfg)
    for a, s in zip(aug, data):
        assert a.frames.shape == (37, 16, 16) and a.boundary == 25
        np.testing.assert_array_equal(a.frames[:25], normalize(s.frames[:25]))
        # identity stub: the tail repeats the last ground-truth frame
        for t in range(25, 37):
            np.testing.assert_array_equal(a.frames[t], normalize(s.frames[24]))


def test_augment_rejects_horizon_mismatch():
    with pytest.raises(ConfigError):
        augment_dataset(CountingStub(13, 4), _seqs(1), DistillConfig())


def test_augment_persist_deterministic_and_teacher_frozen(tmp_path):
    cfg = DistillConfig(t_in=4, t_long=4)
    teacher = init_model(ModelConfig(t_in=4, t_out=2, hid_spatial=8, hid_temporal=8, rng_seed=3))
    before = parameter_hash(teacher)
    data = _seqs(5, t=8)
    aug = augment_dataset(teacher, data, cfg, path=tmp_path / "a", batch_size=2)
    assert parameter_hash(teacher) == before
    augment_dataset(teacher, data, cfg, path=tmp_path / "b", batch_size=3)
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = load_augmented(tmp_path / "a", expected_teacher_hash=before)
    for a, b, s in zip(aug, back, data):
        assert b.boundary == 8 and b.frames.shape == (12, 16, 16)
        np.testing.assert_array_equal(b.frames[:8], normalize(s.frames))
        assert np.all((a.frames[8:] >= 0) & (a.frames[8:] <= 1))
        assert np.abs(b.frames[8:] - a.frames[8:]).max() <= 0.5 / 255 + 1e-6


def test_load_augmented_warns_on_hash_mismatch(tmp_path, caplog):
    cfg = DistillConfig(t_in=4, t_long=4)
    augment_dataset(CountingStub(4, 2), _seqs(1, t=8), cfg, path=tmp_path / "a", teacher_hash="abc")
    with caplog.at_level("WARNING"):
        load_augmented(tmp_path / "a", expected_teacher_hash="def")
    assert "does not match" in caplog.text


def test_sample_subsequence_examples():
    frames = np.arange(25)
    rng = np.random.default_rng(0)
    x, y, r = sample_subsequence(frames, 13, 12, rng)
    assert r == 0 and list(x) == list(range(13)) and list(y) == list(range(13, 25))
    aug = np.arange(37)
    seen = set()
    for _ in range(500):
        x, y, r = sample_subsequence(aug, 13, 12, rng)
        seen.add(r)
        assert list(x) == list(range(r, r + 13)) and list(y) == list(range(r + 13, r + 25))
        if r == 12:
            assert y.min() >= 25  # target entirely synthetic
        if r == 0:
            assert y.max() < 25  # target entirely ground truth
    assert seen == set(range(13))
    with pytest.raises(ValueError):
        sample_subsequence(np.arange(20), 13, 12, rng)


def test_sample_subsequence_uniform_chi2():
    rng = np.random.default_rng(12345)
    aug = np.arange(37)
    rs = [sample_subsequence(aug, 13, 12, rng)[2] for _ in range(10_000)]
    counts = np.bincount(rs, minlength=13)
    assert counts.size == 13
    assert stats.chisquare(counts).pvalue > 0.01


def test_short_teacher_window_range():
    rng = np.random.default_rng(1)
    rs = {sample_subsequence(np.arange(25), 13, 6, rng)[2] for _ in range(400)}
    assert rs == set(range(7))

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tvp.frames import FrameBatch, PipelineConfig, RawVideo, preprocess, resize_pad, uniform_sample


def make_video(n_vid: int, h: int = 16, w: int = 16, seed: int = 0) -> RawVideo:
    rng = np.random.default_rng(seed)
    return RawVideo(
        frames=rng.uniform(0.0, 1.0, size=(n_vid, 3, h, w)).astype(np.float32),
        duration_s=n_vid / 8.0,
    )


# ---------------------------------------------------------------------------
# uniform_sample
# ---------------------------------------------------------------------------

def test_uniform_sample_fixtures():
    assert uniform_sample(10, 5) == [1, 3, 5, 7, 9]
    assert uniform_sample(4, 4) == [0, 1, 2, 3]
    assert uniform_sample(3, 5) == [0, 0, 1, 2, 2]


def test_uniform_sample_validation():
    with pytest.raises(ValueError):
        uniform_sample(0, 4)
    with pytest.raises(ValueError):
        uniform_sample(4, 0)


@given(st.integers(1, 10_000), st.integers(1, 10_000))
@settings(max_examples=300, deadline=None)
def test_uniform_sample_in_range_and_sorted(n_vid, n_sam):
    idx = uniform_sample(n_vid, n_sam)
    assert len(idx) == n_sam
    assert all(0 <= i < n_vid for i in idx)
    assert all(a <= b for a, b in zip(idx, idx[1:]))


# ---------------------------------------------------------------------------
# resize_pad
# ---------------------------------------------------------------------------

def test_resize_pad_tall_input():
    rng = np.random.default_rng(1)
    frame = rng.uniform(0.0, 1.0, size=(3, 100, 50)).astype(np.float32)
    out, region = resize_pad(frame, 64)
    assert out.shape == (3, 64, 64)
    assert region == (64, 32)
    assert np.all(out[:, :, 32:] == 0.0)
    assert np.any(out[:, :, :32] != 0.0)


def test_resize_pad_wide_input():
    rng = np.random.default_rng(2)
    frame = rng.uniform(0.0, 1.0, size=(3, 50, 100)).astype(np.float32)
    out, region = resize_pad(frame, 64)
    assert region == (32, 64)
    assert np.all(out[:, 32:, :] == 0.0)


def test_resize_pad_identity_on_canvas_sized_input():
    rng = np.random.default_rng(3)
    frame = rng.uniform(0.0, 1.0, size=(3, 64, 64)).astype(np.float32)
    out, region = resize_pad(frame, 64)
    assert region == (64, 64)
    np.testing.assert_array_equal(out, frame)


def test_resize_preserves_value_range():
    rng = np.random.default_rng(4)
    for h, w in [(7, 31), (31, 7), (13, 13), (1, 40), (129, 64)]:
        frame = rng.uniform(0.0, 1.0, size=(3, h, w)).astype(np.float32)
        out, _ = resize_pad(frame, 64)
        assert out.min() >= 0.0
        assert out.max() <= 1.0


def test_resize_constant_frame_stays_constant_in_valid_region():
    frame = np.full((3, 30, 70), 0.63, dtype=np.float64)
    out, (rows, cols) = resize_pad(frame, 64)
    np.testing.assert_allclose(out[:, :rows, :cols], 0.63, atol=1e-12)


def test_resize_pad_rejects_bad_shapes():
    with pytest.raises(ValueError):
        resize_pad(np.zeros((3, 0, 5)), 64)
    with pytest.raises(ValueError):
        resize_pad(np.zeros((3, 5)), 64)


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def test_preprocess_deterministic():
    video = make_video(10, h=20, w=36)
    cfg = PipelineConfig(n_sam=5, canvas=32)
    a = preprocess(video, cfg)
    b = preprocess(video, cfg)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.valid_region == b.valid_region


def test_preprocess_matches_sampling_indices():
    video = make_video(10, h=32, w=32)
    cfg = PipelineConfig(n_sam=5, canvas=32)
    batch = preprocess(video, cfg)
    assert batch.n_sam == 5
    for i, src in enumerate([1, 3, 5, 7, 9]):
        np.testing.assert_array_equal(batch.frames[i], video.frames[src])


def test_preprocess_zero_video_gives_zero_batch():
    video = RawVideo(frames=np.zeros((6, 3, 24, 18), dtype=np.float32), duration_s=1.0)
    batch = preprocess(video, PipelineConfig(n_sam=4, canvas=32))
    assert not np.any(batch.frames)


def test_padding_is_exactly_zero():
    video = make_video(6, h=48, w=20)
    batch = preprocess(video, PipelineConfig(n_sam=3, canvas=64))
    for i, (rows, cols) in enumerate(batch.valid_region):
        assert np.all(batch.frames[i][:, rows:, :] == 0.0)
        assert np.all(batch.frames[i][:, :, cols:] == 0.0)


def test_frame_batch_validation():
    with pytest.raises(ValueError):
        FrameBatch(frames=np.zeros((2, 3, 8, 9)))
    with pytest.raises(ValueError):
        RawVideo(frames=np.zeros((0, 3, 8, 8)), duration_s=1.0)

"""Log-mel frontend, channel statistics, frame stacking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tonetrans.features import (LOG_FLOOR, STD_FLOOR, ChannelStats,
                                FrontendConfig, Spectrogram, channel_denormalize,
                                channel_normalize, compute_channel_stats,
                                hz_to_mel, log_mel_spectrogram, mel_filterbank,
                                mel_to_hz, stack_frames, unstack_frames)


def test_frame_count_law():
    cfg = FrontendConfig()
    # (len - window) // hop + 1
    spec = log_mel_spectrogram(np.zeros(1600), cfg)
    assert spec.frames.shape == ((1600 - 400) // 160 + 1, 80)
    assert spec.frames.shape[0] == 8


def test_too_short_signal_rejected():
    with pytest.raises(ValueError):
        log_mel_spectrogram(np.zeros(399), FrontendConfig())


def test_silence_hits_log_floor():
    spec = log_mel_spectrogram(np.zeros(800), FrontendConfig())
    np.testing.assert_allclose(spec.frames, np.log(LOG_FLOOR), atol=1e-9)


def test_pure_tone_peaks_in_matching_mel_channel():
    cfg = FrontendConfig()
    sr = cfg.sample_rate
    t = np.arange(sr) / sr
    tone = 0.1 * np.sin(2 * np.pi * 1000.0 * t)
    spec = log_mel_spectrogram(tone, cfg)
    _, centers = mel_filterbank(cfg)
    hot = int(np.argmax(spec.frames.mean(axis=0)))
    # the winning channel's center frequency brackets the tone
    assert abs(centers[hot] - 1000.0) < 150.0


def test_mel_scale_roundtrip():
    f = np.array([20.0, 440.0, 1000.0, 7900.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-10)


def test_mel_of_1000hz_reference():
    assert hz_to_mel(np.array([1000.0]))[0] == pytest.approx(999.9855, abs=0.5)


def test_filterbank_shape_and_coverage():
    cfg = FrontendConfig()
    fb, centers = mel_filterbank(cfg)
    assert fb.shape == (cfg.num_mels, cfg.window // 2 + 1)
    assert centers.shape == (cfg.num_mels,)
    assert np.all(np.diff(centers) > 0)
    assert fb.sum(axis=1).min() > 0  # every filter passes some energy


def test_channel_stats_roundtrip_and_floor():
    rng = np.random.default_rng(0)
    mats = [rng.standard_normal((50, 4)) * [1.0, 2.0, 0.5, 1e-9] for _ in range(3)]
    stats = compute_channel_stats(mats)
    assert stats.std.min() >= STD_FLOOR  # degenerate channel floored
    x = mats[0]
    np.testing.assert_allclose(
        channel_denormalize(channel_normalize(x, stats), stats), x, atol=1e-9)


def test_normalized_corpus_is_standardized():
    rng = np.random.default_rng(1)
    mats = [rng.standard_normal((100, 3)) * 2.0 + 5.0 for _ in range(5)]
    stats = compute_channel_stats(mats)
    pooled = np.concatenate([channel_normalize(m, stats) for m in mats])
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(pooled.std(axis=0), 1.0, atol=1e-6)


def test_channel_stats_serialization():
    stats = compute_channel_stats([np.random.default_rng(2).standard_normal((10, 3))])
    again = ChannelStats.from_dict(stats.to_dict())
    np.testing.assert_array_equal(stats.mean, again.mean)
    np.testing.assert_array_equal(stats.std, again.std)


def test_stack_frames_law_and_values():
    x = np.arange(14 * 3, dtype=float).reshape(14, 3)
    out = stack_frames(x, 4)
    assert out.shape == (3, 12)  # floor(14/4) groups, trailing 2 dropped
    np.testing.assert_array_equal(out[0], x[:4].reshape(-1))
    np.testing.assert_array_equal(out[2], x[8:12].reshape(-1))


def test_stack_unstack_roundtrip():
    x = np.random.default_rng(3).standard_normal((12, 5))
    np.testing.assert_array_equal(unstack_frames(stack_frames(x, 3), 3), x)


def test_stack_frames_validates():
    with pytest.raises(ValueError):
        stack_frames(np.zeros((2, 3)), 4)  # fewer frames than stride
    with pytest.raises(ValueError):
        stack_frames(np.zeros((4, 3)), 0)


def test_spectrogram_validates_contents():
    with pytest.raises(ValueError):
        Spectrogram(np.zeros((0, 80)), 100.0)
    with pytest.raises(ValueError):
        Spectrogram(np.full((3, 80), np.nan), 100.0)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(4, 60), d=st.integers(1, 12), s=st.integers(1, 4))
def test_stack_length_law_property(t, d, s):
    x = np.random.default_rng(42).standard_normal((t, d))
    if t < s:
        return
    out = stack_frames(x, s)
    assert out.shape == (t // s, s * d)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 5))
def test_frame_count_law_property(n):
    cfg = FrontendConfig()
    length = cfg.window + n * cfg.hop
    spec = log_mel_spectrogram(np.zeros(length), cfg)
    assert spec.frames.shape[0] == n + 1


def test_frontend_config_frame_rate():
    cfg = FrontendConfig()
    assert cfg.frame_rate_hz == pytest.approx(100.0)

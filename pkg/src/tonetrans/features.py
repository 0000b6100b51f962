"""Spectrogram pipeline: log-mel extraction, channel statistics, frame stacking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-3  # minimum per-channel std after flooring
LOG_FLOOR = 1e-6  # mel power floor before the log


@dataclass(frozen=True)
class FrontendConfig:
    """Feature extraction parameters. Defaults: 16 kHz, 25 ms window, 10 ms hop."""

    sample_rate: int = 16000
    window: int = 400
    hop: int = 160
    num_mels: int = 80
    fmin: float = 20.0
    fmax: float | None = None  # None = Nyquist

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate / self.hop


@dataclass
class Spectrogram:
    """T x d matrix of log-mel frames plus its frame rate."""

    frames: np.ndarray
    frame_rate_hz: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"Spectrogram needs a (T>=1, d) matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("Spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_channels(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters (num_mels, n_bins) and their center frequencies in Hz."""
    n_bins = cfg.window // 2 + 1
    fmax = cfg.sample_rate / 2 if cfg.fmax is None else cfg.fmax
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.num_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fb = np.zeros((cfg.num_mels, n_bins))
    for i in range(cfg.num_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - left) / max(center - left, 1e-12)
        falling = (right - fft_freqs) / max(right - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb, hz_pts[1:-1]


def log_mel_spectrogram(waveform: np.ndarray, cfg: FrontendConfig) -> Spectrogram:
    """Frame, window, FFT, mel-pool, and log with floor ``LOG_FLOOR``.

    Frame count law: T = (len - window) // hop + 1.
    """
    wave = np.asarray(waveform, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError(f"waveform must be 1-d, got shape {wave.shape}")
    if wave.size < cfg.window:
        raise ValueError(
            f"waveform of {wave.size} samples is shorter than one window ({cfg.window})"
        )
    num_frames = (wave.size - cfg.window) // cfg.hop + 1
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(num_frames)[:, None]
    frames = wave[idx] * np.hanning(cfg.window)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    fb, _ = mel_filterbank(cfg)
    mel = power @ fb.T
    return Spectrogram(np.log(np.maximum(mel, LOG_FLOOR)), cfg.frame_rate_hz)


@dataclass
class ChannelStats:
    """Per-channel mean/std pooled over every frame of a corpus split."""

    mean: np.ndarray
    std: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("ChannelStats mean/std must be matching 1-d vectors")
        if np.any(self.std < STD_FLOOR):
            raise ValueError(f"ChannelStats std below floor {STD_FLOOR}")

    @property
    def num_channels(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"split": self.split, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), d.get("split", "train"))


def compute_channel_stats(frame_matrices, split: str = "train") -> ChannelStats:
    """Pooled per-channel mean/std over all frames of all utterances."""
    total = 0
    s1 = None
    s2 = None
    for frames in frame_matrices:
        arr = np.asarray(frames, dtype=np.float64)
        if s1 is None:
            s1 = np.zeros(arr.shape[1])
            s2 = np.zeros(arr.shape[1])
        total += arr.shape[0]
        s1 += arr.sum(axis=0)
        s2 += (arr * arr).sum(axis=0)
    if total == 0 or s1 is None:
        raise ValueError("compute_channel_stats: empty corpus")
    mean = s1 / total
    var = np.maximum(s2 / total - mean * mean, 0.0)
    return ChannelStats(mean, np.maximum(np.sqrt(var), STD_FLOOR), split)


def channel_normalize(frames: np.ndarray, stats: ChannelStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.num_channels:
        raise ValueError(
            f"channel_normalize: {frames.shape[-1]} channels vs stats {stats.num_channels}"
        )
    return (frames - stats.mean) / stats.std


def channel_denormalize(frames: np.ndarray, stats: ChannelStats) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != stats.num_channels:
        raise ValueError(
            f"channel_denormalize: {frames.shape[-1]} channels vs stats {stats.num_channels}"
        )
    return frames * stats.std + stats.mean


def stack_frames(frames: np.ndarray, stride: int) -> np.ndarray:
    """Concatenate ``stride`` consecutive frames per row; trailing remainder dropped.

    (T, d) -> (T // stride, d * stride), row i = frames[i*s : (i+1)*s] flattened.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"stack_frames: expected (T, d), got {frames.shape}")
    t, d = frames.shape
    if stride < 1 or t < stride:
        raise ValueError(f"stack_frames: need T >= stride >= 1, got T={t}, stride={stride}")
    rows = t // stride
    return frames[: rows * stride].reshape(rows, stride * d)


def unstack_frames(stacked: np.ndarray, stride: int) -> np.ndarray:
    """(M, d*stride) -> (M*stride, d); inverse of stack_frames on aligned input."""
    stacked = np.asarray(stacked)
    if stacked.ndim != 2 or stacked.shape[1] % stride != 0:
        raise ValueError(
            f"unstack_frames: width {stacked.shape} not divisible by stride {stride}"
        )
    m, w = stacked.shape
    return stacked.reshape(m * stride, w // stride)

"""Acoustic frontend: log-mel extraction, F0 tracking and phase reconstruction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 16000
    frame_length: int = 1024
    hop_length: int = 160
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 60.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.3

    def __post_init__(self):
        if self.mel_bins <= 0:
            raise ValueError("mel_bins must be positive")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if not 0 < self.hop_length <= self.frame_length:
            raise ValueError("hop_length must lie in (0, frame_length]")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")

    @property
    def log_min(self) -> float:
        return math.log(self.log_floor)

    def num_frames(self, num_samples: int) -> int:
        return -(-num_samples // self.hop_length)


@dataclass(frozen=True, eq=False)
class MelSpec:
    """Log-amplitude mel spectrogram, shape ``(frames, bins)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"mel must be a non-empty 2-D array, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    def check(self, config: AudioConfig) -> None:
        if self.bins != config.mel_bins:
            raise ValueError(f"mel has {self.bins} bins, config expects {config.mel_bins}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("mel contains non-finite values")
        if self.values.min() < config.log_min - 1e-4:
            raise ValueError("mel values fall below the log floor")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: AudioConfig) -> np.ndarray:
    """Center frequency in Hz of every mel filter."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    return edges[1:-1]


def mel_filterbank(config: AudioConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape ``(mel_bins, frame_length // 2 + 1)``."""
    n_freq = config.frame_length // 2 + 1
    fft_freqs = np.linspace(0.0, config.sample_rate / 2, n_freq)
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.mel_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None] - lower) / (center - lower)
    falling = (upper - fft_freqs[None]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def _frame_signal(waveform: np.ndarray, config: AudioConfig) -> np.ndarray:
    # frame i is centered on sample i * hop; zero padding keeps short inputs legal
    n = config.num_frames(len(waveform))
    half = config.frame_length // 2
    padded = np.pad(waveform, (half, half + config.frame_length))
    idx = np.arange(config.frame_length)[None, :] + config.hop_length * np.arange(n)[:, None]
    return padded[idx]


def _as_waveform(waveform) -> np.ndarray:
    w = np.asarray(waveform, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("waveform must be one-dimensional")
    if w.size == 0:
        raise ValueError("waveform is empty")
    return w


def extract_mel(waveform, config: AudioConfig = AudioConfig()) -> MelSpec:
    """Log-mel spectrogram with ``ceil(len / hop)`` center-padded frames."""
    w = _as_waveform(waveform)
    frames = _frame_signal(w, config) * np.hanning(config.frame_length)[None]
    magnitude = np.abs(np.fft.rfft(frames, axis=1))
    energy = magnitude @ mel_filterbank(config).T
    return MelSpec(np.log(np.maximum(energy, config.log_floor)))


def estimate_f0(waveform, config: AudioConfig = AudioConfig()) -> np.ndarray:
    """Per-frame F0 in Hz by normalized autocorrelation; 0 marks unvoiced frames.

    Frames are placed exactly like :func:`extract_mel`, so the output length
    always equals the mel frame count of the same waveform.
    """
    w = _as_waveform(waveform)
    frames = _frame_signal(w, config)
    n, width = frames.shape
    lag_lo = max(1, int(math.floor(config.sample_rate / config.f0_max)))
    lag_hi = min(width - 2, int(math.ceil(config.sample_rate / config.f0_min)))

    spectrum = np.fft.rfft(frames, n=2 * width, axis=1)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, axis=1)[:, : lag_hi + 2]
    sq = np.cumsum(frames**2, axis=1)
    total = sq[:, -1:]
    lags = np.arange(lag_hi + 2)
    head = sq[:, width - 1 - lags]
    tail = total - np.concatenate([np.zeros((n, 1)), sq[:, lags[1:] - 1]], axis=1)
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        nacf = np.where(denom > 1e-12, acf / denom, 0.0)

    f0 = np.zeros(n)
    energy_ok = total[:, 0] > 1e-10 * width
    band = nacf[:, lag_lo : lag_hi + 1]
    for i in np.flatnonzero(energy_ok):
        r = band[i]
        peak = r.max()
        if peak < config.voicing_threshold:
            continue
        # smallest lag near the global maximum avoids octave-down errors
        candidates = np.flatnonzero(r >= 0.9 * peak)
        k = candidates[0]
        while k + 1 < len(r) and r[k + 1] > r[k]:
            k += 1
        lag = float(k + lag_lo)
        if 0 < k < len(r) - 1:
            a, b, c = r[k - 1], r[k], r[k + 1]
            curvature = a - 2 * b + c
            if curvature < 0:
                lag += 0.5 * (a - c) / curvature
        f0[i] = np.clip(config.sample_rate / lag, config.f0_min, config.f0_max)
    return f0


def griffin_lim(mel: MelSpec, config: AudioConfig = AudioConfig(), iterations: int = 60, seed: int = 0) -> np.ndarray:
    """Waveform from a log-mel spectrogram by iterative phase reconstruction."""
    fb = mel_filterbank(config)
    amplitude = np.exp(mel.values.astype(np.float64))
    amplitude[mel.values <= config.log_min + 1e-6] = 0.0
    magnitude = np.maximum(amplitude @ np.linalg.pinv(fb).T, 0.0)

    n_frames = mel.frames
    length = n_frames * config.hop_length
    window = np.hanning(config.frame_length)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    half = config.frame_length // 2
    idx = np.arange(config.frame_length)[None, :] + config.hop_length * np.arange(n_frames)[:, None]
    padded_len = length + 2 * half + config.frame_length
    norm = np.zeros(padded_len)
    np.add.at(norm, idx, np.broadcast_to(window**2, idx.shape))
    norm = np.maximum(norm, 1e-8)

    signal = np.zeros(length)
    for _ in range(iterations):
        frames = np.fft.irfft(magnitude * phase, n=config.frame_length, axis=1) * window
        buf = np.zeros(padded_len)
        np.add.at(buf, idx, frames)
        signal = (buf / norm)[half : half + length]
        rebuilt = np.fft.rfft(_frame_signal(signal, config) * window, axis=1)
        phase = np.exp(1j * np.angle(rebuilt))
    return signal.astype(np.float32)

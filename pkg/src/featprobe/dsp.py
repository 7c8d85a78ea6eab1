"""Audio loading and the mel-spectrogram pipeline.

Defaults: 2048-point FFT, hop 502, periodic Hann window, centered frames
with reflect padding, 128 Slaney mel bands (area-normalized) up to 8 kHz,
then dB relative to the spectrogram maximum with an 80 dB floor.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

N_FFT = 2048
HOP = 502
N_MELS = 128
F_MAX = 8000.0
TOP_DB = 80.0


class AudioFormatError(ValueError):
    pass


class SilentSpectrogramWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # (n_mels, frames)
    scale: str  # "power" or "dB"
    sample_rate: int
    hop: int = HOP
    silent: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def read_wav(path) -> AudioClip:
    """Load 16-bit PCM or 32-bit float WAV as a mono clip in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise AudioFormatError(f"{path}: {e}") from e
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)


def fit_length(clip: AudioClip, seconds: float) -> AudioClip:
    """Zero-pad or truncate to exactly ``seconds * sample_rate`` samples."""
    n = int(round(seconds * clip.sample_rate))
    s = clip.samples
    if s.size >= n:
        s = s[:n]
    else:
        s = np.concatenate([s, np.zeros(n - s.size)])
    return AudioClip(s, clip.sample_rate)


def hann_window(n: int) -> np.ndarray:
    # periodic (DFT-even) Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Centered, reflect-padded, Hann-windowed frames, shape (frames, n_fft)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty signal")
    pad = n_fft // 2
    if samples.size > 1:
        padded = np.pad(samples, pad, mode="reflect")
    else:
        padded = np.pad(samples, pad, mode="edge")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop]
    return frames * hann_window(n_fft)


def stft_power(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Squared magnitude of the one-sided STFT, shape (1 + n_fft//2, frames)."""
    frames = frame_signal(clip.samples, n_fft, hop)
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T


def fft_frequencies(sample_rate: int, n_fft: int = N_FFT) -> np.ndarray:
    return np.linspace(0.0, sample_rate / 2.0, 1 + n_fft // 2)


# Slaney mel scale: linear below 1 kHz, logarithmic above.
_F_SP = 200.0 / 3.0
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log_part = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log_part, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log_part = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log_part, lin)


@functools.lru_cache(maxsize=16)
def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmax: float = F_MAX, fmin: float = 0.0) -> np.ndarray:
    """Triangular Slaney-normalized filters, shape (n_mels, 1 + n_fft//2). Read-only."""
    if fmax > sample_rate / 2.0:
        raise ValueError(f"fmax {fmax} Hz exceeds Nyquist {sample_rate / 2.0} Hz")
    fft_hz = fft_frequencies(sample_rate, n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_hz[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def melspectrogram(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP,
                   n_mels: int = N_MELS, fmax: float = F_MAX) -> MelSpectrogram:
    power = stft_power(clip, n_fft, hop)
    fb = mel_filterbank(clip.sample_rate, n_fft, n_mels, fmax)
    return MelSpectrogram(fb @ power, "power", clip.sample_rate, hop)


def power_to_db(spec: MelSpectrogram, top_db: float = TOP_DB) -> MelSpectrogram:
    """10*log10(S / max S), floored at -top_db. All-zero input maps to the floor."""
    if spec.scale != "power":
        raise ValueError(f"expected power-scale spectrogram, got {spec.scale}")
    s = spec.values
    ref = s.max() if s.size else 0.0
    if ref <= 0.0:
        warnings.warn("all-zero spectrogram mapped to the dB floor", SilentSpectrogramWarning,
                      stacklevel=2)
        return MelSpectrogram(np.full(s.shape, -top_db), "dB", spec.sample_rate, spec.hop, True)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(s / ref)
    return MelSpectrogram(np.maximum(db, -top_db), "dB", spec.sample_rate, spec.hop)


def clip_to_db(clip: AudioClip, clip_seconds: float | None = None) -> MelSpectrogram:
    if clip_seconds is not None:
        clip = fit_length(clip, clip_seconds)
    return power_to_db(melspectrogram(clip))


def expected_frames(n_samples: int, hop: int = HOP) -> int:
    return 1 + n_samples // hop

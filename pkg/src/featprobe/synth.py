"""Desk-scale synthetic corpus: harmonic tones, log-frequency chirps and
resonant noise decays, written as 16-bit WAV plus a JSON-lines manifest."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import dsp
from .tensorio import write_manifest

CLASS_NAMES = ("tone", "chirp", "noise")
TASKS = {"class": "classification", "pitchHz": "regression", "amplitude": "regression"}


@dataclass(frozen=True)
class SynthConfig:
    n: int = 200
    seed: int = 0
    classes: int = 2
    sample_rate: int = 16000
    clip_seconds: float = 4.0
    midi_low: int = 40
    midi_high: int = 96
    train_fraction: float = 0.7


def midi_to_hz(m: int) -> float:
    return 440.0 * 2.0 ** ((m - 69) / 12.0)


def _envelope(t: np.ndarray, decay: float, attack: float = 0.02) -> np.ndarray:
    return np.minimum(t / attack, 1.0) * np.exp(-t / decay)


def render(kind: int, pitch: float, amplitude: float, decay: float, rng: np.random.Generator,
           sample_rate: int, seconds: float) -> np.ndarray:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    nyq = sample_rate / 2.0
    if kind == 0:
        x = np.zeros_like(t)
        for h, g in ((1, 1.0), (2, 0.5), (3, 0.25)):
            if h * pitch < nyq * 0.95:
                x += g * np.sin(2 * np.pi * h * pitch * t + rng.uniform(0, 2 * np.pi))
    elif kind == 1:
        span = 2.0 ** rng.uniform(1.0, 2.0)  # octaves swept: 1..2
        f0, f1 = pitch / np.sqrt(span), min(pitch * np.sqrt(span), nyq * 0.9)
        x = signal.chirp(t, f0=f0, t1=seconds, f1=f1, method="logarithmic",
                         phi=rng.uniform(0, 360))
    else:
        noise = rng.standard_normal(t.size)
        q = 8.0
        b, a = signal.iirpeak(min(pitch, nyq * 0.9), q, fs=sample_rate)
        x = signal.lfilter(b, a, noise)
    x = x / (np.max(np.abs(x)) or 1.0)
    x = x * _envelope(t, decay) + 1e-3 * rng.standard_normal(t.size)
    return amplitude * x / max(np.max(np.abs(x)), 1e-12)


def stratified_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator) -> np.ndarray:
    split = np.empty(labels.size, dtype=object)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_train = int(round(train_fraction * idx.size))
        split[idx[:n_train]] = "train"
        split[idx[n_train:]] = "test"
    return split


def generate(out_dir, cfg: SynthConfig = SynthConfig()) -> Path:
    """Write ``cfg.n`` clips and ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    if not 2 <= cfg.classes <= len(CLASS_NAMES):
        raise ValueError(f"classes must be in 2..{len(CLASS_NAMES)}")
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    labels = np.arange(cfg.n) % cfg.classes
    midi = rng.integers(cfg.midi_low, cfg.midi_high + 1, size=cfg.n)
    amps = np.round(rng.uniform(0.3, 0.9, size=cfg.n), 3)
    decays = rng.uniform(0.5, 3.0, size=cfg.n)
    split = stratified_split(labels, cfg.train_fraction, rng)
    records = []
    for i in range(cfg.n):
        pitch = midi_to_hz(int(midi[i]))
        x = render(int(labels[i]), pitch, float(amps[i]), float(decays[i]),
                   np.random.default_rng([cfg.seed, i]), cfg.sample_rate, cfg.clip_seconds)
        rel = f"audio/clip_{i:05d}.wav"
        dsp.write_wav(out / rel, dsp.AudioClip(x, cfg.sample_rate))
        records.append({"path": rel, "split": str(split[i]),
                        "labels": {"class": int(labels[i]), "pitchHz": pitch,
                                   "amplitude": float(amps[i])}})
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, records, cfg.sample_rate, cfg.clip_seconds, TASKS)
    return manifest

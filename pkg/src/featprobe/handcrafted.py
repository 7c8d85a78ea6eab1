"""Hand-crafted features computed from dB mel-spectrograms and raw audio."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import dsp
from .tensorio import FeatureMatrix

WAVELET_STATS = ("mean", "median", "std", "var", "kurtosis", "q25", "q75")
COMBINED_STATS = ("std", "var", "kurtosis", "q25", "q75")
AXES = ("overTime", "overFrequency")
SPECTRAL_KINDS = ("rms", "centroid", "bandwidth", "flatness", "rolloff")
FLATNESS_AMIN = 1e-10


# ---------------------------------------------------------------- spectrogram stats


def mean_power(db: np.ndarray) -> np.ndarray:
    return np.asarray(db, dtype=np.float64).mean(axis=1)


def median_power(db: np.ndarray) -> np.ndarray:
    return np.median(np.asarray(db, dtype=np.float64), axis=1)


def time_to_db(db: np.ndarray, threshold: float = -70.0) -> np.ndarray:
    """First frame index at which each mel bin is at or below ``threshold``.

    Bins that never get there report the frame count.
    """
    db = np.asarray(db)
    hit = db <= threshold
    first = np.argmax(hit, axis=1).astype(np.float64)
    first[~hit.any(axis=1)] = db.shape[1]
    return first


# ---------------------------------------------------------------- frame-wise spectral


def spectral_stat(power: np.ndarray, freqs: np.ndarray, kind: str,
                  rolloff: float = 0.85) -> np.ndarray:
    """Per-frame statistic of a power spectrogram laid out (bins, frames).

    Silent frames give 0 for centroid/bandwidth/rolloff and 1 for flatness.
    """
    S = np.asarray(power, dtype=np.float64)
    f = np.asarray(freqs, dtype=np.float64)[:, None]
    total = S.sum(axis=0)
    silent = total <= 0.0
    safe_total = np.where(silent, 1.0, total)
    if kind == "centroid":
        out = (f * S).sum(axis=0) / safe_total
    elif kind == "bandwidth":
        c = (f * S).sum(axis=0) / safe_total
        out = np.sqrt(np.maximum(((f - c) ** 2 * S).sum(axis=0) / safe_total, 0.0))
    elif kind == "rolloff":
        cum = np.cumsum(S, axis=0)
        idx = np.argmax(cum >= rolloff * total, axis=0)
        out = f[idx, 0]
    elif kind == "flatness":
        Sg = np.maximum(S, FLATNESS_AMIN)
        out = np.exp(np.log(Sg).mean(axis=0)) / Sg.mean(axis=0)
        return np.where(silent, 1.0, out)
    else:
        raise ValueError(f"unknown spectral statistic {kind!r}")
    return np.where(silent, 0.0, out)


def framewise_spectral(clip: dsp.AudioClip, kind: str, n_fft: int = dsp.N_FFT,
                       hop: int = dsp.HOP, rolloff: float = 0.85) -> np.ndarray:
    """One value per STFT frame, using the same framing as the mel pipeline."""
    if kind == "rms":
        frames = dsp.frame_signal(clip.samples, n_fft, hop)
        return np.sqrt(np.mean(frames**2, axis=1))
    power = dsp.stft_power(clip, n_fft, hop)
    return spectral_stat(power, dsp.fft_frequencies(clip.sample_rate, n_fft), kind, rolloff)


# ---------------------------------------------------------------- wavelets


def ricker_sample(a: float, points: int) -> np.ndarray:
    """Ricker (Mexican hat) wavelet of width ``a`` sampled at ``points`` offsets
    centered on (points - 1) / 2."""
    if a <= 0 or points < 1:
        raise ValueError("need a > 0 and points >= 1")
    amp = 2.0 / (np.sqrt(3.0 * a) * np.pi**0.25)
    t = np.arange(points, dtype=np.float64) - (points - 1) / 2.0
    x = (t / a) ** 2
    return amp * (1.0 - x) * np.exp(-x / 2.0)


def ricker_transform(seqs: np.ndarray, a: float) -> np.ndarray:
    """Same-length zero-padded convolution of every row of ``seqs`` with the
    Ricker wavelet, support min(10a, row length)."""
    seqs = np.asarray(seqs, dtype=np.float64)
    L = seqs.shape[1]
    w = ricker_sample(a, int(min(10 * a, L)))
    return np.stack([np.convolve(row, w, mode="same") for row in seqs])


def _excess_kurtosis(c: np.ndarray) -> np.ndarray:
    mu = c.mean(axis=1, keepdims=True)
    d = c - mu
    var = (d**2).mean(axis=1)
    m4 = (d**4).mean(axis=1)
    scale = np.abs(c).max(axis=1)
    flat = var <= (1e-12 * scale) ** 2
    safe = np.where(flat, 1.0, var)
    return np.where(flat, 0.0, m4 / safe**2 - 3.0)


def summarize(coeffs: np.ndarray, stat: str) -> np.ndarray:
    """Row-wise summary statistic of a coefficient matrix."""
    if stat == "mean":
        return coeffs.mean(axis=1)
    if stat == "median":
        return np.median(coeffs, axis=1)
    if stat == "std":
        return coeffs.std(axis=1)
    if stat == "var":
        return coeffs.var(axis=1)
    if stat == "kurtosis":
        return _excess_kurtosis(coeffs)
    if stat == "q25":
        return np.quantile(coeffs, 0.25, axis=1)
    if stat == "q75":
        return np.quantile(coeffs, 0.75, axis=1)
    raise ValueError(f"unknown statistic {stat!r}")


def cwt_summary(db: np.ndarray, a: float, stat: str = "mean", axis: str = "overTime") -> np.ndarray:
    """Ricker-transform each mel bin over time (``overTime``, output length = bins)
    or each frame over frequency (``overFrequency``, output length = frames),
    then reduce the coefficients with ``stat``."""
    db = np.asarray(db, dtype=np.float64)
    if axis == "overTime":
        seqs = db
    elif axis == "overFrequency":
        seqs = db.T
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return summarize(ricker_transform(seqs, a), stat)


# ---------------------------------------------------------------- catalog

_SPEC_RE = re.compile(r"^\s*([A-Za-z0-9]+)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class FeatureSpec:
    kind: str
    threshold: float | None = None
    bandwidth: float | None = None
    stat: str | None = None
    axis: str | None = None
    fraction: float | None = None

    KINDS = (
        "meanPower", "medianPower", "timeToDb", "rms", "spectralCentroid",
        "spectralBandwidth", "spectralFlatness", "spectralRolloff", "waveletStat",
        "waveletCombined", "top4Combined",
    )

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "timeToDb" and (self.threshold is None or self.threshold >= 0):
            raise ValueError("timeToDb needs a negative dB threshold")
        if self.kind in ("waveletStat", "waveletCombined"):
            if self.bandwidth is None or self.bandwidth <= 0:
                raise ValueError(f"{self.kind} needs a positive bandwidth")
            if self.axis not in AXES:
                raise ValueError(f"axis must be one of {AXES}")
        if self.kind == "waveletStat" and self.stat not in WAVELET_STATS:
            raise ValueError(f"stat must be one of {WAVELET_STATS}")

    @property
    def name(self) -> str:
        k = self.kind
        if k == "timeToDb":
            return f"timeToDb({_num(self.threshold)})"
        if k == "spectralRolloff":
            return f"spectralRolloff({_num(self.fraction if self.fraction is not None else 0.85)})"
        if k == "waveletStat":
            return f"waveletStat({_num(self.bandwidth)},{self.stat},{self.axis})"
        if k == "waveletCombined":
            return f"waveletCombined({_num(self.bandwidth)},{self.axis})"
        return k

    @property
    def needs_audio(self) -> bool:
        return self.kind in ("rms", "spectralCentroid", "spectralBandwidth",
                             "spectralFlatness", "spectralRolloff")

    @classmethod
    def parse(cls, text: str) -> "FeatureSpec":
        """Parse names like ``timeToDb(-70)`` or ``waveletStat(25,mean,overTime)``."""
        m = _SPEC_RE.match(text)
        if not m:
            raise ValueError(f"cannot parse feature spec {text!r}")
        kind, args = m.group(1), m.group(2)
        parts = [p.strip() for p in args.split(",")] if args else []
        if kind == "timeToDb":
            return cls(kind, threshold=float(parts[0]) if parts else -70.0)
        if kind == "spectralRolloff":
            return cls(kind, fraction=float(parts[0]) if parts else 0.85)
        if kind == "waveletStat":
            stat = parts[1] if len(parts) > 1 else "mean"
            axis = parts[2] if len(parts) > 2 else "overTime"
            return cls(kind, bandwidth=float(parts[0]), stat=stat, axis=axis)
        if kind == "waveletCombined":
            axis = parts[1] if len(parts) > 1 else "overTime"
            return cls(kind, bandwidth=float(parts[0]), axis=axis)
        if parts:
            raise ValueError(f"{kind} takes no arguments")
        return cls(kind)

    def expand(self) -> list["FeatureSpec"]:
        """Composite specs broken into their elementary blocks, in order."""
        if self.kind == "waveletCombined":
            return [FeatureSpec("waveletStat", bandwidth=self.bandwidth, stat=s, axis=self.axis)
                    for s in COMBINED_STATS]
        if self.kind == "top4Combined":
            return [
                FeatureSpec("meanPower"),
                FeatureSpec("timeToDb", threshold=-70.0),
                FeatureSpec("waveletStat", bandwidth=25.0, stat="mean", axis="overTime"),
                *FeatureSpec("waveletCombined", bandwidth=25.0, axis="overTime").expand(),
            ]
        return [self]


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


_SPECTRAL_KIND = {
    "rms": "rms", "spectralCentroid": "centroid", "spectralBandwidth": "bandwidth",
    "spectralFlatness": "flatness", "spectralRolloff": "rolloff",
}


def compute_block(spec: FeatureSpec, db: np.ndarray, clip: dsp.AudioClip | None = None) -> np.ndarray:
    """Vector for one elementary feature spec on one example."""
    k = spec.kind
    if k == "meanPower":
        return mean_power(db)
    if k == "medianPower":
        return median_power(db)
    if k == "timeToDb":
        return time_to_db(db, spec.threshold)
    if k == "waveletStat":
        return cwt_summary(db, spec.bandwidth, spec.stat, spec.axis)
    if spec.needs_audio:
        if clip is None:
            raise ValueError(f"{spec.name} needs the raw audio clip")
        frac = spec.fraction if spec.fraction is not None else 0.85
        return framewise_spectral(clip, _SPECTRAL_KIND[k], rolloff=frac)
    raise ValueError(f"{spec.name} is composite; expand() it first")


def example_features(specs: Sequence[FeatureSpec], db: np.ndarray,
                     clip: dsp.AudioClip | None = None) -> tuple[np.ndarray, list[str]]:
    vecs, names = [], []
    for spec in specs:
        for block in spec.expand():
            v = compute_block(block, db, clip)
            vecs.append(v)
            names += [f"{block.name}[{i}]" for i in range(v.size)]
    return np.concatenate(vecs), names


def assemble(specs: Sequence[FeatureSpec], spectrograms: Sequence[np.ndarray],
             clips: Sequence[dsp.AudioClip] | None = None, workers: int = 1) -> FeatureMatrix:
    """Row-per-example matrix of the requested features concatenated in spec order."""
    if not specs:
        raise ValueError("empty feature spec list")
    if not spectrograms:
        raise ValueError("no spectrograms")
    shapes = {np.shape(s) for s in spectrograms}
    if len(shapes) != 1:
        raise ValueError(f"spectrogram geometry differs across examples: {sorted(shapes)}")
    clips = list(clips) if clips is not None else [None] * len(spectrograms)

    def one(i):
        return example_features(specs, spectrograms[i], clips[i])

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, range(len(spectrograms))))
    else:
        results = [one(i) for i in range(len(spectrograms))]
    return FeatureMatrix(np.stack([r[0] for r in results]), results[0][1])

"""SNR, MFCC, mel-cepstral distortion, success rate and attack range."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.fft
from scipy import signal

from .audio_io import AudioBuffer
from .errors import EmptyGrid, EmptyList, LengthMismatch, MetaEarError, TooShort, ZeroReference

SNR_CAP_DB = 100.0
MCD_SUCCESS_THRESHOLD = 8.0
MCD_SCALE = 10.0 / math.log(10.0)


def snr_db(reference: AudioBuffer, test: AudioBuffer) -> float:
    """Scale-optimal SNR: project ``test`` on ``reference``, the remainder is noise."""
    r, t = reference.samples, test.samples
    if len(r) != len(t):
        raise LengthMismatch(f"{len(r)} vs {len(t)} samples")
    rr = float(np.dot(r, r))
    if rr == 0:
        raise ZeroReference("reference has no energy")
    s = float(np.dot(r, t)) / rr
    sig = s * s * rr
    noise = float(np.sum((t - s * r) ** 2))
    if noise == 0:
        return SNR_CAP_DB
    if sig == 0:
        return -SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(sig / noise))


@dataclass(frozen=True)
class MfccConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 26
    n_ceps: int = 13  # kept coefficients, c0 excluded
    preemphasis: float = 0.97
    window: str = "hann"
    n_fft: int = 512
    fmin: float = 0.0
    fmax: float | None = None  # None: Nyquist
    log_floor: float = 1e-10  # used for all-zero input only
    top_db: float = 80.0  # mel energies floored this far below the buffer's peak

    def __post_init__(self):
        if not self.frame_ms > self.hop_ms > 0:
            raise MetaEarError("need frame > hop > 0")
        if self.n_mels < self.n_ceps + 1:
            raise MetaEarError("need more mel filters than kept coefficients")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    f = np.fft.rfftfreq(n_fft, 1.0 / rate)
    fb = np.zeros((n_mels, len(f)))
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (f - lo) / (c - lo)
        down = (hi - f) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mfcc(audio: AudioBuffer, config: MfccConfig = MfccConfig()) -> np.ndarray:
    """Cepstral coefficients 1..n_ceps per frame, shape ``(frames, n_ceps)``."""
    sr = audio.sample_rate
    frame = int(round(config.frame_ms * sr / 1000))
    hop = int(round(config.hop_ms * sr / 1000))
    x = audio.samples
    if len(x) < frame:
        raise TooShort(f"need >= {frame} samples for one frame, got {len(x)}")
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - config.preemphasis * x[:-1]
    n_frames = 1 + (len(y) - frame) // hop
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    win = signal.get_window(config.window, frame)
    n_fft = max(config.n_fft, frame)
    power = np.abs(np.fft.rfft(y[idx] * win, n=n_fft, axis=1)) ** 2
    fmax = sr / 2 if config.fmax is None else config.fmax
    energies = power @ mel_filterbank(config.n_mels, n_fft, sr, config.fmin, fmax).T
    peak = energies.max()
    # relative floor keeps the cepstra independent of overall level
    floor = peak * 10 ** (-config.top_db / 10) if peak > 0 else config.log_floor
    logmel = np.log(np.maximum(energies, floor))
    ceps = scipy.fft.dct(logmel, type=2, norm="ortho", axis=1)
    return ceps[:, 1:config.n_ceps + 1]


def mcd_frames(ref_ceps: np.ndarray, test_ceps: np.ndarray) -> np.ndarray:
    d = ref_ceps - test_ceps
    return MCD_SCALE * np.sqrt(2.0 * np.sum(d * d, axis=1))


def mcd(reference: AudioBuffer, test: AudioBuffer, config: MfccConfig = MfccConfig()) -> float:
    """Frame-aligned mel-cepstral distortion averaged over frames (no time warping)."""
    if len(reference) != len(test):
        raise LengthMismatch(f"{len(reference)} vs {len(test)} samples")
    return float(mcd_frames(mfcc(reference, config), mfcc(test, config)).mean())


@dataclass
class EvalReport:
    snr_db: float
    mcd: float
    stage_metrics: dict[str, tuple[float, float]] = field(default_factory=dict)
    distance: float | None = None
    trial: int | None = None

    @property
    def success(self) -> bool:
        return self.mcd < MCD_SUCCESS_THRESHOLD

    def csv_row(self) -> str:
        return f"{self.distance!r},{self.trial},{self.snr_db!r},{self.mcd!r},{int(self.success)}"


CSV_HEADER = "distance_m,trial,snr_db,mcd,success"


def success_rate(reports) -> float:
    reports = list(reports)
    if not reports:
        raise EmptyList("no reports")
    return sum(r.success for r in reports) / len(reports)


def rsa_from_rates(distances, rates, threshold: float = 0.8) -> float:
    """Largest grid distance reached before the success rate first fails ``> threshold``."""
    distances = list(distances)
    if not distances:
        raise EmptyGrid("empty distance grid")
    if any(b <= a for a, b in zip(distances, distances[1:])):
        raise MetaEarError("distance grid must be strictly ascending")
    best = 0.0
    for d, r in zip(distances, rates):
        if r > threshold:
            best = d
        else:
            break
    return best


def rsa(generator: Callable[[float, int], EvalReport], distances, trials_per_distance: int = 30,
        threshold: float = 0.8) -> float:
    """Range of successful attack over an ascending distance grid.

    ``generator(distance, trial)`` must be deterministic. Distances after the
    first failing one are not evaluated.
    """
    distances = list(distances)
    if not distances:
        raise EmptyGrid("empty distance grid")
    rates = []
    for d in distances:
        rate = success_rate(generator(d, t) for t in range(trials_per_distance))
        rates.append(rate)
        if rate <= threshold:
            break
    return rsa_from_rates(distances[:len(rates)], rates, threshold)

"""Mono PCM16 WAV I/O, the audio buffer type and deterministic test signals."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CorruptWav, EmptyBand, MetaEarError, NyquistViolation, UnsupportedFormat

DEFAULT_RATE = 16000
LSB = 2.0**-15
TEST_SIGNAL_RMS = 0.1


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono samples in full-scale units with their sample rate.

    ``clipped`` counts samples that were clamped when the buffer was produced.
    """

    samples: np.ndarray = field(repr=False)
    sample_rate: int = DEFAULT_RATE
    clipped: int = 0

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise MetaEarError("sample rate must be positive")
        if not np.all(np.isfinite(x)):
            raise MetaEarError("samples must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2))) if len(self.samples) else 0.0

    def replace(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_pcm16(x: np.ndarray) -> tuple[np.ndarray, int]:
    """Clamp to [-1, 1 - 2^-15], scale by 32768 and round half away from zero."""
    x = np.asarray(x, dtype=np.float64)
    clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0 - LSB)))
    q = round_half_away(np.clip(x, -1.0, 1.0 - LSB) * 32768.0)
    return q.astype(np.int16), clipped


def quantize(x: np.ndarray) -> tuple[np.ndarray, int]:
    q, clipped = to_pcm16(x)
    return q.astype(np.float64) / 32768.0, clipped


def write_wav(path, buffer: AudioBuffer) -> None:
    pcm, _ = to_pcm16(buffer.samples)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(buffer.sample_rate))
        w.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path) -> AudioBuffer:
    try:
        with wave.open(str(path), "rb") as w:
            if w.getsampwidth() != 2:
                raise UnsupportedFormat(f"{path}: {8 * w.getsampwidth()}-bit samples, need 16-bit PCM")
            if w.getnchannels() != 1:
                raise UnsupportedFormat(f"{path}: {w.getnchannels()} channels, need mono")
            n = w.getnframes()
            rate = w.getframerate()
            raw = w.readframes(n)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        raise CorruptWav(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise CorruptWav(f"{path}: truncated header") from exc
    if len(raw) != 2 * n:
        raise CorruptWav(f"{path}: data chunk holds {len(raw) // 2} of {n} frames")
    return AudioBuffer(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def band_limited_noise(rng: np.random.Generator, length: int, rate: int, lo: float, hi: float) -> np.ndarray:
    """White Gaussian noise with every FFT bin outside ``[lo, hi]`` zeroed. Unit RMS."""
    if length == 0:
        return np.zeros(0)
    spec = np.fft.rfft(rng.standard_normal(length))
    f = np.fft.rfftfreq(length, 1.0 / rate)
    mask = (f >= lo) & (f <= hi)
    if not mask.any():
        raise EmptyBand(f"band ({lo}, {hi}) Hz holds no FFT bins")
    x = np.fft.irfft(spec * mask, n=length)
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def _normalise(x: np.ndarray, rms: float = TEST_SIGNAL_RMS) -> np.ndarray:
    cur = np.sqrt(np.mean(x**2))
    return x * (rms / cur) if cur > 0 else x


def harmonic_voice(duration: float, rate: int = DEFAULT_RATE, seed: int = 0, f0: float = 120.0,
                   formant_start: float = 250.0, formant_end: float = 1000.0,
                   formant_bandwidth: float = 120.0) -> np.ndarray:
    """Voiced-speech stand-in: glottal pulse train through a sweeping formant.

    The pitch carries a slow vibrato and small per-period jitter drawn from
    ``seed``; the formant center moves linearly from ``formant_start`` to
    ``formant_end`` over the buffer.
    """
    n = int(round(duration * rate))
    if n == 0:
        return np.zeros(0)
    rng = np.random.default_rng([seed, 0x701CE])
    t = np.arange(n) / rate
    vib_phase = rng.uniform(0, 2 * np.pi)
    pitch = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * 4.5 * t + vib_phase))
    excitation = np.zeros(n)
    pos = rng.uniform(0, rate / f0)
    while pos < n:
        k = int(pos)
        excitation[k] += 1.0 - (pos - k)
        if k + 1 < n:
            excitation[k + 1] += pos - k
        pos += rate / pitch[k] * (1.0 + 0.005 * rng.standard_normal())
    # glottal roll-off: two one-pole low-passes
    for _ in range(2):
        excitation = kernels.time_varying_resonator(excitation, np.full(n, 1 - 0.9), np.full(n, -0.9), np.zeros(n))
    fc = np.linspace(formant_start, formant_end, n)
    r = math.exp(-math.pi * formant_bandwidth / rate)
    a1 = -2.0 * r * np.cos(2 * np.pi * fc / rate)
    a2 = np.full(n, r * r)
    b0 = (1.0 - r) * np.sqrt(1.0 + r * r - 2.0 * r * np.cos(4 * np.pi * fc / rate))
    y = kernels.time_varying_resonator(excitation, b0, a1, a2)
    return _normalise(y - y.mean())  # the pulse train's DC is not voice


def synth_test_signal(kind: str, duration: float = 1.0, rate: int = DEFAULT_RATE, seed: int = 0,
                      **params) -> AudioBuffer:
    """Deterministic test signal at 0.1 full-scale RMS.

    ``kind`` is ``"tone"`` (``freq``), ``"harmonic_voice"`` (``f0``, formant
    sweep) or ``"band_noise"`` (``lo``, ``hi``).
    """
    nyq = rate / 2
    n = int(round(duration * rate))
    if kind == "tone":
        freq = float(params.get("freq", 590.0))
        if not 0 < freq < nyq:
            raise NyquistViolation(f"tone at {freq} Hz, Nyquist is {nyq} Hz")
        phase = float(params.get("phase", 0.0))
        x = np.sin(2 * np.pi * freq * np.arange(n) / rate + phase)
        return AudioBuffer(_normalise(x), rate)
    if kind == "harmonic_voice":
        top = max(params.get("formant_end", 1000.0), params.get("formant_start", 250.0), params.get("f0", 120.0))
        if top >= nyq:
            raise NyquistViolation(f"voice content at {top} Hz, Nyquist is {nyq} Hz")
        return AudioBuffer(harmonic_voice(duration, rate, seed, **params), rate)
    if kind == "band_noise":
        lo, hi = float(params.get("lo", 250.0)), float(params.get("hi", 1000.0))
        if hi > nyq:
            raise NyquistViolation(f"band edge {hi} Hz above Nyquist {nyq} Hz")
        rng = np.random.default_rng([seed, 0xBA4D])
        return AudioBuffer(_normalise(band_limited_noise(rng, n, rate, lo, hi)), rate)
    raise MetaEarError(f"unknown test signal kind {kind!r}")

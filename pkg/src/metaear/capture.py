"""Forward model of the resonator array in place of the hardware.

Signal path per trial::

    source --1/r--> + ambient noise --per-element gain curve--> + mic self-noise --> PCM16

Ambient noise enters before the resonators and is amplified with the speech;
microphone self-noise enters after them. Levels are dB SPL mapped to digital
RMS through ``calibration`` (the SPL of a full-scale RMS signal).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arraydesign import ArrayDesign, StitchPlan
from .audio_io import AudioBuffer, band_limited_noise, quantize
from .errors import ConfigError, RateMismatch
from .gainmodel import STANDARD_GRID, GainCurve

__all__ = [
    "AudioBuffer",
    "ChannelModel",
    "MultiChannelCapture",
    "NoiseProfile",
    "bare_microphone_capture",
    "capture_multichannel",
    "make_ambient_noise",
    "propagate",
    "spl_to_rms",
    "rms_to_spl",
    "unit_curve",
]

DEFAULT_CALIBRATION = 100.0  # dB SPL at 0 dBFS RMS
LAB_NOISE_LEVEL = 43.0
# Indoor background sits below the speech band (ventilation, mains hum).
LAB_NOISE_BAND = (20.0, 200.0)
WIND_RAIN_BAND = (20.0, 300.0)
TRAFFIC_BAND = (50.0, 500.0)

_AMBIENT_STREAM = 0xA3B
_SELF_NOISE_STREAM = 0x5E1F


def spl_to_rms(level_db: float, calibration: float = DEFAULT_CALIBRATION) -> float:
    return 10.0 ** ((level_db - calibration) / 20.0)


def rms_to_spl(rms: float, calibration: float = DEFAULT_CALIBRATION) -> float:
    return 20.0 * np.log10(rms) + calibration


@dataclass(frozen=True)
class NoiseProfile:
    band: tuple[float, float]
    level: float  # dB SPL
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.band
        if not (0 <= lo < hi):
            raise ConfigError(f"noise band {self.band} must satisfy 0 <= lo < hi")
        if self.level < 0:
            raise ConfigError("noise level must be >= 0 dB SPL")

    @classmethod
    def lab(cls, seed: int = 0) -> "NoiseProfile":
        return cls(LAB_NOISE_BAND, LAB_NOISE_LEVEL, seed)


@dataclass(frozen=True)
class ChannelModel:
    distance: float = 1.0  # m
    ref_distance: float = 0.05  # m
    source_level: float = 60.0  # dB SPL at ref_distance
    ambient: NoiseProfile | None = None
    mic_self_noise_level: float | None = 30.0  # dB SPL equivalent; None disables
    calibration: float = DEFAULT_CALIBRATION
    quantize: bool = True

    def __post_init__(self):
        if not self.ref_distance > 0:
            raise ConfigError("ref_distance must be positive")
        if self.distance < self.ref_distance:
            raise ConfigError(f"distance {self.distance} m is inside ref_distance {self.ref_distance} m")
        if self.source_level < 0 or (self.mic_self_noise_level is not None and self.mic_self_noise_level < 0):
            raise ConfigError("levels must be >= 0 dB SPL")

    def at(self, distance: float) -> "ChannelModel":
        return ChannelModel(distance, self.ref_distance, self.source_level, self.ambient,
                            self.mic_self_noise_level, self.calibration, self.quantize)

    def with_ambient(self, ambient: NoiseProfile | None) -> "ChannelModel":
        return ChannelModel(self.distance, self.ref_distance, self.source_level, ambient,
                            self.mic_self_noise_level, self.calibration, self.quantize)

    def to_json(self) -> dict:
        return {
            "distance_m": self.distance,
            "ref_distance_m": self.ref_distance,
            "source_level_db": self.source_level,
            "ambient": None if self.ambient is None else
            {"band_hz": list(self.ambient.band), "level_db": self.ambient.level, "seed": self.ambient.seed},
            "mic_self_noise_db": self.mic_self_noise_level,
            "calibration_db": self.calibration,
            "quantize": self.quantize,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ChannelModel":
        amb = obj.get("ambient")
        try:
            ambient = None if amb is None else NoiseProfile(tuple(amb["band_hz"]), float(amb["level_db"]),
                                                            int(amb.get("seed", 0)))
            return cls(float(obj.get("distance_m", 1.0)), float(obj.get("ref_distance_m", 0.05)),
                       float(obj.get("source_level_db", 60.0)), ambient,
                       obj.get("mic_self_noise_db", 30.0), float(obj.get("calibration_db", DEFAULT_CALIBRATION)),
                       bool(obj.get("quantize", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed channel model: {exc}") from exc


@dataclass(frozen=True, eq=False)
class MultiChannelCapture:
    channels: tuple[AudioBuffer, ...]
    design: ArrayDesign
    plan: StitchPlan
    applied_curves: tuple[GainCurve, ...] = field(repr=False)

    def __post_init__(self):
        if len(self.channels) != len(self.design.elements):
            raise ConfigError(f"{len(self.channels)} channels for {len(self.design.elements)} elements")
        if len({(len(c), c.sample_rate) for c in self.channels}) > 1:
            raise RateMismatch("channels differ in length or sample rate")

    @property
    def sample_rate(self) -> int:
        return self.channels[0].sample_rate

    def __len__(self) -> int:
        return len(self.channels[0])

    def channel(self, label: str) -> AudioBuffer:
        return self.channels[self.design.index(label)]

    @property
    def clipped(self) -> int:
        return sum(c.clipped for c in self.channels)


def unit_curve(grid: tuple[float, float, int] = STANDARD_GRID) -> GainCurve:
    return GainCurve.on_grid(grid, np.ones(grid[2]))


def propagate(source: AudioBuffer, model: ChannelModel) -> AudioBuffer:
    """Scale ``source`` to ``source_level`` at the reference distance, then apply 1/r."""
    x = source.samples
    rms = source.rms
    if rms == 0:
        return AudioBuffer(np.zeros_like(x), source.sample_rate)
    scale = spl_to_rms(model.source_level, model.calibration) / rms
    return AudioBuffer(x * (scale * model.ref_distance / model.distance), source.sample_rate)


def make_ambient_noise(profile: NoiseProfile, length: int, rate: int,
                       calibration: float = DEFAULT_CALIBRATION) -> AudioBuffer:
    """Band-limited white noise at ``profile.level`` dB SPL; deterministic per seed."""
    lo, hi = profile.band
    if hi > rate / 2:
        raise ConfigError(f"noise band {profile.band} exceeds Nyquist {rate / 2}")
    rng = np.random.default_rng([profile.seed, _AMBIENT_STREAM])
    x = band_limited_noise(rng, length, rate, lo, hi)
    return AudioBuffer(x * spl_to_rms(profile.level, calibration), rate)


def _apply_curve(spectrum: np.ndarray, freqs: np.ndarray, curve: GainCurve, n: int) -> np.ndarray:
    return np.fft.irfft(spectrum * curve.at(freqs), n=n)


def acoustic_mix(source: AudioBuffer, model: ChannelModel, seed: int) -> np.ndarray:
    """Propagated source plus ambient noise at the array, before any resonator."""
    mix = propagate(source, model).samples.copy()
    if model.ambient is not None and len(mix):
        amb = model.ambient
        profile = NoiseProfile(amb.band, amb.level, hash_seed(seed, amb.seed))
        mix += make_ambient_noise(profile, len(mix), source.sample_rate, model.calibration).samples
    return mix


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def self_noise(model: ChannelModel, seed: int, channel: int, length: int) -> np.ndarray:
    if model.mic_self_noise_level is None:
        return np.zeros(length)
    rng = np.random.default_rng([seed, _SELF_NOISE_STREAM, channel])
    return rng.standard_normal(length) * spl_to_rms(model.mic_self_noise_level, model.calibration)


def capture_multichannel(source: AudioBuffer, model: ChannelModel, curves, seed: int,
                         design: ArrayDesign | None = None, plan: StitchPlan | None = None,
                         rate: int | None = None) -> MultiChannelCapture:
    """Simulate one synchronous recording through every resonator.

    Each channel is the FFT of the acoustic mix multiplied by that element's
    gain curve (linear interpolation, gain 1 beyond the grid), plus
    independent self-noise seeded by ``(seed, channel index)``, then PCM16
    quantised unless ``model.quantize`` is false.
    """
    curves = tuple(curves)
    if rate is not None and rate != source.sample_rate:
        raise RateMismatch(f"source at {source.sample_rate} Hz, capture expects {rate} Hz")
    if design is None:
        from .arraydesign import canonical_array, default_plan

        design = canonical_array()
        plan = plan or default_plan(design)
    n = len(source)
    sr = source.sample_rate
    mix = acoustic_mix(source, model, seed)
    spectrum = np.fft.rfft(mix) if n else np.zeros(0, dtype=np.complex128)
    freqs = np.fft.rfftfreq(n, 1.0 / sr) if n else np.zeros(0)
    channels = []
    for ch, curve in enumerate(curves):
        y = _apply_curve(spectrum, freqs, curve, n) if n else np.zeros(0)
        y = y + self_noise(model, seed, ch, n)
        clipped = 0
        if model.quantize:
            y, clipped = quantize(y)
        channels.append(AudioBuffer(y, sr, clipped))
    if plan is None:
        from .arraydesign import full_band_plan

        plan = full_band_plan(design.elements[0].label, 0.0, sr / 2)
    return MultiChannelCapture(tuple(channels), design, plan, curves)


def bare_microphone_capture(source: AudioBuffer, model: ChannelModel, seed: int,
                            rate: int | None = None) -> AudioBuffer:
    """A plain microphone at the same spot: one channel, unit gain."""
    from .arraydesign import ArrayDesign, Element
    from .gainmodel import MetamaterialSpec

    mic = ArrayDesign((Element("mic", MetamaterialSpec(D=80.0, a=3.2), (0.0, source.sample_rate / 2), 1.0),))
    cap = capture_multichannel(source, model, [unit_curve()], seed, design=mic, rate=rate)
    return cap.channels[0]

"""Reconstruction: crop-and-stitch, distortion suppression, noise suppression.

Stage order in :func:`run_pipeline`::

    noise-band isolation -> crop & stitch (V2) -> residual denoise (V3)
    -> jump removal + gain balancing (V4)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import kernels
from .arraydesign import ArrayDesign, Segment, StitchPlan
from .audio_io import AudioBuffer
from .capture import MultiChannelCapture
from .errors import (
    AllIsolated,
    ConfigError,
    EmptyBand,
    MissingCurve,
    PlanChannelMismatch,
    TooShort,
)
from .gainmodel import STANDARD_GRID, GainCurve

CALIBRATION_SEGMENT = 16384
CALIBRATION_MIN_SEGMENTS = 64
NOISE_SEGMENT = 4096
NOISE_MIN_SEGMENTS = 16
NOISE_DYNAMIC_RANGE_DB = 30.0
FULL_BAND_FRACTION = 0.8


@dataclass(frozen=True)
class PipelineConfig:
    stitch_plan: StitchPlan | None = None  # None: use the capture's own plan
    enable_distortion_suppression: bool = True
    enable_noise_suppression: bool = True
    enable_residual_denoise: bool = True
    jump_sigma_factor: float = 3.0
    balance_cap: float = 10.0
    noise_psd_margin: float = 10.0  # dB
    subtraction_alpha: float = 1.0
    subtraction_beta: float = 0.1
    denoise_frame: int = 512

    def __post_init__(self):
        if not self.jump_sigma_factor > 0:
            raise ConfigError("jump_sigma_factor must be positive")
        if not self.balance_cap >= 1:
            raise ConfigError("balance_cap must be >= 1")
        if not 0 < self.subtraction_beta < 1:
            raise ConfigError("subtraction_beta must lie in (0, 1)")
        if self.subtraction_alpha < 0:
            raise ConfigError("subtraction_alpha must be >= 0")

    def to_json(self) -> dict:
        return {
            "cuts_hz": None if self.stitch_plan is None else self.stitch_plan.cut_freqs,
            "distortion_suppression": self.enable_distortion_suppression,
            "noise_suppression": self.enable_noise_suppression,
            "residual_denoise": self.enable_residual_denoise,
            "jump_sigma_factor": self.jump_sigma_factor,
            "balance_cap": self.balance_cap,
            "noise_psd_margin_db": self.noise_psd_margin,
            "subtraction_alpha": self.subtraction_alpha,
            "subtraction_beta": self.subtraction_beta,
            "denoise_frame": self.denoise_frame,
        }

    @classmethod
    def from_json(cls, obj: dict, plan: StitchPlan | None = None) -> "PipelineConfig":
        try:
            return cls(
                plan,
                bool(obj.get("distortion_suppression", True)),
                bool(obj.get("noise_suppression", True)),
                bool(obj.get("residual_denoise", True)),
                float(obj.get("jump_sigma_factor", 3.0)),
                float(obj.get("balance_cap", 10.0)),
                float(obj.get("noise_psd_margin_db", 10.0)),
                float(obj.get("subtraction_alpha", 1.0)),
                float(obj.get("subtraction_beta", 0.1)),
                int(obj.get("denoise_frame", 512)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed pipeline config: {exc}") from exc


@dataclass(frozen=True)
class NoiseBand:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ConfigError(f"noise band ({self.lo}, {self.hi}) must satisfy 0 <= lo < hi")

    def intersects(self, band: tuple[float, float]) -> bool:
        return self.lo < band[1] and band[0] < self.hi


# -- gain curve estimation ---------------------------------------------------


def estimate_gain_curves(capture: MultiChannelCapture, reference: AudioBuffer,
                         segment: int = CALIBRATION_SEGMENT,
                         grid: tuple[float, float, int] = STANDARD_GRID) -> list[GainCurve]:
    """Per-element magnitude response from a white-noise calibration recording.

    Welch estimate (Hann, 50% overlap) of ``sqrt(Pyy / Pxx)`` for each
    channel against the known excitation, sampled onto ``grid``.
    """
    x = reference.samples
    if len(x) < CALIBRATION_MIN_SEGMENTS * segment:
        raise TooShort(f"calibration needs >= {CALIBRATION_MIN_SEGMENTS * segment} samples, got {len(x)}")
    if len(capture) != len(x):
        raise ConfigError("calibration capture and reference differ in length")
    fs = reference.sample_rate
    kw = dict(fs=fs, window="hann", nperseg=segment, noverlap=segment // 2, detrend=False)
    f, pxx = signal.welch(x, **kw)
    grid_f = grid[0] + grid[1] * np.arange(grid[2])
    curves = []
    for ch in capture.channels:
        _, pyy = signal.welch(ch.samples, **kw)
        ratio = np.sqrt(pyy / np.maximum(pxx, np.finfo(float).tiny))
        curves.append(GainCurve.on_grid(grid, np.interp(grid_f, f, ratio)))
    return curves


# -- jump removal -------------------------------------------------------------


def _check_len(n: int) -> None:
    if n < 3:
        raise TooShort(f"jump detection needs >= 3 bins, got {n}")


def jump_threshold(deviation: np.ndarray, sigma_factor: float) -> float:
    return float(deviation.mean() + sigma_factor * deviation.std())


def detect_jump_points(curve: GainCurve | np.ndarray, sigma_factor: float = 3.0) -> np.ndarray:
    """Indices whose deviation from the local 3-point median exceeds mean + k*std.

    The deviation statistics are taken over the whole curve; edge bins use a
    replicated neighbour.
    """
    g = curve.gains if isinstance(curve, GainCurve) else np.asarray(curve, dtype=np.float64)
    _check_len(len(g))
    dev, _ = kernels.median3_deviation(g)
    return np.nonzero(dev > jump_threshold(dev, sigma_factor))[0]


def smooth_gains(gains, sigma_factor: float = 3.0, max_passes: int | None = None) -> tuple[np.ndarray, int]:
    """Replace detected jumps by their 3-point median until none remain.

    Statistics are recomputed each pass and all flagged bins of a pass are
    replaced from that pass's values. Stops after ``max_passes`` (default:
    curve length). Returns ``(gains, passes)``.
    """
    g = np.array(gains, dtype=np.float64)
    _check_len(len(g))
    limit = len(g) if max_passes is None else max_passes
    passes = 0
    while passes < limit:
        dev, med = kernels.median3_deviation(g)
        flagged = dev > jump_threshold(dev, sigma_factor)
        if not flagged.any():
            break
        g[flagged] = med[flagged]
        passes += 1
    return g, passes


def smooth_jumps(curve: GainCurve, sigma_factor: float = 3.0) -> GainCurve:
    return curve.with_gains(smooth_gains(curve.gains, sigma_factor)[0])


# -- gain balancing -----------------------------------------------------------


def balance_gains(curve: GainCurve, cap: float = 10.0,
                  target: float | None = None) -> tuple[GainCurve, GainCurve]:
    """Pull every in-band bin toward the median in-band gain.

    In-band bins are those with gain >= 1; the target is their median unless
    given, and the per-bin correction ``target / G`` is clamped to
    ``[1/cap, cap]``. Returns ``(corrected, correction)``.
    """
    g = curve.gains
    inband = g >= 1.0
    corr = np.ones_like(g)
    if inband.any():
        if target is None:
            target = float(np.median(g[inband]))
        corr[inband] = np.clip(target / g[inband], 1.0 / cap, cap)
    return curve.with_gains(g * corr), curve.with_gains(corr)


# -- crop and stitch ----------------------------------------------------------


def _channel_index(capture: MultiChannelCapture, plan: StitchPlan) -> list[int]:
    labels = capture.design.labels
    missing = [s.label for s in plan.segments if s.label not in labels]
    if missing:
        raise PlanChannelMismatch(f"plan uses elements {missing} absent from the capture")
    return [labels.index(s.label) for s in plan.segments]


def crop_and_stitch(capture: MultiChannelCapture, plan: StitchPlan | None = None) -> AudioBuffer:
    """Assemble one spectrum from each plan segment's channel; zero elsewhere."""
    plan = plan or capture.plan
    chan = _channel_index(capture, plan)
    n = len(capture)
    sr = capture.sample_rate
    if n == 0:
        return AudioBuffer(np.zeros(0), sr)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    owner = plan.bin_owner(freqs)
    out = np.zeros(len(freqs), dtype=np.complex128)
    spectra: dict[int, np.ndarray] = {}
    for k, ci in enumerate(chan):
        if ci not in spectra:
            spectra[ci] = np.fft.rfft(capture.channels[ci].samples)
        sel = owner == k
        out[sel] = spectra[ci][sel]
    return AudioBuffer(np.fft.irfft(out, n=n), sr)


def band_limit(audio: AudioBuffer, intervals) -> AudioBuffer:
    """Keep only FFT bins inside the given ``[lo, hi)`` intervals."""
    plan = StitchPlan(tuple(Segment(lo, hi, "x") for lo, hi in intervals))
    n = len(audio)
    if n == 0:
        return audio
    freqs = np.fft.rfftfreq(n, 1.0 / audio.sample_rate)
    spec = np.fft.rfft(audio.samples)
    spec[plan.bin_owner(freqs) < 0] = 0
    return AudioBuffer(np.fft.irfft(spec, n=n), audio.sample_rate)


# -- distortion suppression ---------------------------------------------------


@dataclass(frozen=True)
class CurveStates:
    """Composite stitched gain curve before and after each correction step."""

    raw: GainCurve
    smoothed: GainCurve
    balanced: GainCurve
    passes: int
    # per plan segment: the owning element's own curve, raw and corrected
    segments: tuple[tuple[Segment, np.ndarray, np.ndarray], ...] = ()

    def to_csv(self) -> str:
        lines = ["freq_hz,gain_raw,gain_smoothed,gain_balanced"]
        for f, a, b, c in zip(self.raw.freqs, self.raw.gains, self.smoothed.gains, self.balanced.gains):
            lines.append(f"{float(f)!r},{float(a)!r},{float(b)!r},{float(c)!r}")
        return "\n".join(lines) + "\n"


def composite_curve(curves, plan: StitchPlan, design: ArrayDesign) -> GainCurve:
    """Stitched gain on the curves' grid; zero where the plan covers nothing."""
    curves = list(curves)
    if len(curves) != len(design.elements):
        raise MissingCurve(f"{len(curves)} curves for {len(design.elements)} elements")
    base = curves[0]
    if any(not c.same_grid(base) for c in curves):
        raise ConfigError("estimated curves must share one grid")
    owner = plan.bin_owner(base.freqs)
    g = np.zeros(len(base))
    for k, seg in enumerate(plan.segments):
        try:
            idx = design.index(seg.label)
        except ValueError as exc:
            raise MissingCurve(f"no curve for element {seg.label}") from exc
        sel = owner == k
        g[sel] = curves[idx].gains[sel]
    return base.with_gains(g)


def distortion_curves(curves, plan: StitchPlan, design: ArrayDesign,
                      config: PipelineConfig = PipelineConfig()) -> CurveStates:
    """Jump removal then median balancing on the composite stitched curve."""
    raw = composite_curve(curves, plan, design)
    covered = np.nonzero(raw.gains > 0)[0]
    smoothed_g = raw.gains.copy()
    passes = 0
    if covered.size >= 3:
        lo, hi = covered[0], covered[-1] + 1
        smoothed_g[lo:hi], passes = smooth_gains(raw.gains[lo:hi], config.jump_sigma_factor)
    smoothed = raw.with_gains(smoothed_g)
    balanced, _ = balance_gains(smoothed, config.balance_cap)
    inband = smoothed_g >= 1.0
    target = float(np.median(smoothed_g[inband])) if inband.any() else None
    owner = plan.bin_owner(raw.freqs)
    segments = []
    for k, seg in enumerate(plan.segments):
        # the element's own curve stays continuous across the cut points;
        # nodes the segment owns take the composite's smoothed values
        own = curves[design.index(seg.label)].gains
        s = own.copy()
        s[owner == k] = smoothed_g[owner == k]
        b, _ = balance_gains(raw.with_gains(s), config.balance_cap, target)
        segments.append((seg, own, b.gains))
    return CurveStates(raw, smoothed, balanced, passes, tuple(segments))


def _ratio(freqs, grid, num, den) -> np.ndarray:
    num = np.interp(freqs, grid, num)
    den = np.interp(freqs, grid, den)
    out = np.ones_like(freqs)
    pos = den > 0
    out[pos] = num[pos] / den[pos]
    return out


def equalizer_response(states: CurveStates, freqs: np.ndarray) -> np.ndarray:
    """Per-frequency factor that turns the raw stitched gain into the balanced one.

    Each segment interpolates its own element's curves, raw and corrected
    separately before dividing, so narrow jumps cancel between grid nodes and
    the stitch discontinuities are not smeared across a cut.
    """
    grid = states.raw.freqs
    if not states.segments:
        return _ratio(freqs, grid, states.balanced.gains, states.raw.gains)
    out = np.ones_like(freqs)
    plan = StitchPlan(tuple(seg for seg, _, _ in states.segments))
    owner = plan.bin_owner(freqs)
    for k, (_, raw, final) in enumerate(states.segments):
        sel = owner == k
        out[sel] = _ratio(freqs[sel], grid, final, raw)
    return out


def apply_distortion_suppression(stitched: AudioBuffer, estimated_curves, plan: StitchPlan,
                                 design: ArrayDesign, config: PipelineConfig = PipelineConfig(),
                                 states: CurveStates | None = None) -> AudioBuffer:
    if states is None:
        states = distortion_curves(estimated_curves, plan, design, config)
    n = len(stitched)
    if n == 0:
        return stitched
    freqs = np.fft.rfftfreq(n, 1.0 / stitched.sample_rate)
    spec = np.fft.rfft(stitched.samples) * equalizer_response(states, freqs)
    return AudioBuffer(np.fft.irfft(spec, n=n), stitched.sample_rate)


# -- noise suppression --------------------------------------------------------


def detect_noise_band(noise_ref: AudioBuffer, margin_db: float = 10.0,
                      segment: int = NOISE_SEGMENT) -> NoiseBand:
    """Frequency span of PSD bins standing ``margin_db`` above the median PSD.

    Welch PSD with a Blackman-Harris window; the PSD is floored 30 dB below
    its peak so digital silence and window leakage do not set the median. More than 80% of bins
    flagged is reported as the full band.
    """
    x = noise_ref.samples
    hop = segment // 2
    if len(x) < segment or (len(x) - segment) // hop + 1 < NOISE_MIN_SEGMENTS:
        raise TooShort(f"noise reference needs >= {NOISE_MIN_SEGMENTS} Welch segments of {segment}")
    f, psd = signal.welch(x, fs=noise_ref.sample_rate, window="blackmanharris", nperseg=segment,
                          noverlap=hop, detrend=False)
    peak = psd.max()
    if peak <= 0:
        raise EmptyBand("noise reference is silent")
    psd = np.maximum(psd, peak * 10 ** (-NOISE_DYNAMIC_RANGE_DB / 10))
    flagged = psd > np.median(psd) * 10 ** (margin_db / 10)
    if not flagged.any():
        raise EmptyBand("no PSD bin stands out of the noise floor")
    if flagged.mean() > FULL_BAND_FRACTION:
        return NoiseBand(0.0, noise_ref.sample_rate / 2)
    sel = f[flagged]
    lo, hi = float(sel.min()), float(sel.max())
    if hi == lo:
        hi = lo + (f[1] - f[0])
    return NoiseBand(lo, hi)


def suppress_noise(plan: StitchPlan, design: ArrayDesign, noise_band: NoiseBand | None) -> StitchPlan:
    """Drop every segment whose element's declared band intersects the noise band."""
    if noise_band is None:
        return plan
    bands = {e.label: e.band for e in design.elements}
    kept = tuple(s for s in plan.segments if not noise_band.intersects(bands[s.label]))
    if not kept:
        raise AllIsolated(f"noise band ({noise_band.lo}, {noise_band.hi}) Hz overlaps every element")
    return StitchPlan(kept)


def isolated_elements(plan: StitchPlan, design: ArrayDesign, noise_band: NoiseBand) -> set[str]:
    bands = {e.label: e.band for e in design.elements}
    return {s.label for s in plan.segments if noise_band.intersects(bands[s.label])}


# -- residual denoise ---------------------------------------------------------


def residual_denoise(audio: AudioBuffer, noise_ref: AudioBuffer,
                     config: PipelineConfig = PipelineConfig()) -> AudioBuffer:
    """Magnitude spectral subtraction with a spectral floor, phase kept.

    ``|Y'| = max(|Y| - alpha * mean|N|, beta * |Y|)`` per STFT bin (Hann,
    50% overlap), resynthesised by overlap-add.
    """
    n = len(audio)
    frame = config.denoise_frame
    if n == 0:
        return audio
    kw = dict(fs=audio.sample_rate, window="hann", nperseg=frame, noverlap=frame // 2)
    _, _, Y = signal.stft(audio.samples, **kw)
    if len(noise_ref):
        _, _, N = signal.stft(noise_ref.samples, **kw)
        noise_mag = np.abs(N).mean(axis=1, keepdims=True)
    else:
        noise_mag = np.zeros((Y.shape[0], 1))
    mag = np.abs(Y)
    new_mag = np.maximum(mag - config.subtraction_alpha * noise_mag, config.subtraction_beta * mag)
    scale = np.divide(new_mag, mag, out=np.ones_like(mag), where=mag > 0)
    _, y = signal.istft(Y * scale, **kw)
    out = np.zeros(n)
    m = min(n, len(y))
    out[:m] = y[:m]
    return AudioBuffer(out, audio.sample_rate)


# -- full pipeline ------------------------------------------------------------


@dataclass
class Diagnostics:
    plan: StitchPlan
    noise_band: NoiseBand | None = None
    isolated: tuple[str, ...] = ()
    stages: dict[str, AudioBuffer] = field(default_factory=dict)
    curves: CurveStates | None = None


def mean_channel(capture: MultiChannelCapture) -> AudioBuffer:
    return AudioBuffer(np.mean([c.samples for c in capture.channels], axis=0), capture.sample_rate)


def run_pipeline(capture: MultiChannelCapture, noise_ref: MultiChannelCapture | None,
                 estimated_curves, config: PipelineConfig = PipelineConfig()) -> tuple[AudioBuffer, Diagnostics]:
    """Noise isolation, stitching, residual denoise and distortion suppression.

    ``noise_ref`` is an ambient-only recording through the same array; it is
    required by the noise suppression and residual denoise stages.
    """
    plan = config.stitch_plan or capture.plan
    diag = Diagnostics(plan)
    if config.enable_noise_suppression and noise_ref is not None:
        try:
            band = detect_noise_band(mean_channel(noise_ref), config.noise_psd_margin)
        except EmptyBand:
            band = None
        if band is not None:
            diag.noise_band = band
            diag.isolated = tuple(sorted(isolated_elements(plan, capture.design, band)))
            plan = suppress_noise(plan, capture.design, band)
    diag.plan = plan
    out = crop_and_stitch(capture, plan)
    diag.stages["stitched"] = out
    if config.enable_residual_denoise and noise_ref is not None:
        out = residual_denoise(out, crop_and_stitch(noise_ref, plan), config)
        diag.stages["denoised"] = out
    if config.enable_distortion_suppression:
        if estimated_curves is None:
            raise MissingCurve("distortion suppression needs estimated gain curves")
        diag.curves = distortion_curves(estimated_curves, plan, capture.design, config)
        out = apply_distortion_suppression(out, estimated_curves, plan, capture.design, config, diag.curves)
        diag.stages["equalized"] = out
    return out, diag

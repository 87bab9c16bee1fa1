"""Trials and distance sweeps over a simulated device.

A *device* is an array design plus the true (defect-bearing) gain curve of
every element. It is calibrated once with a white-noise recording; every
trial then synthesises a voice, captures it at one distance together with an
ambient-only noise recording, reconstructs it and scores it against the
propagated source restricted to the band the reconstruction kept.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arraydesign import (
    SCHEMA_VERSION,
    ArrayDesign,
    StitchPlan,
    canonical_array,
    default_plan,
    design_from_json,
    design_to_json,
)
from .audio_io import AudioBuffer, quantize, read_wav, synth_test_signal
from .capture import (
    ChannelModel,
    NoiseProfile,
    bare_microphone_capture,
    capture_multichannel,
    MultiChannelCapture,
    hash_seed,
    propagate,
    rms_to_spl,
)
from .errors import ConfigError, RateMismatch
from .gainmodel import STANDARD_GRID, DefectModel, GainCurve, inject_defects, synth_gain_curve, system_peak_gain
from .metrics import EvalReport, MfccConfig, mcd, rsa_from_rates, snr_db
from .reconstruct import CALIBRATION_SEGMENT, CALIBRATION_MIN_SEGMENTS, PipelineConfig, band_limit, estimate_gain_curves, run_pipeline

CALIBRATION_LEVEL = 60.0  # dB SPL at the reference distance
NOISE_REF_SECONDS = 4.5
DEFAULT_DISTANCES = tuple(float(d) for d in np.round(np.arange(0.25, 4.01, 0.25), 2))


@dataclass(frozen=True)
class Device:
    design: ArrayDesign
    plan: StitchPlan
    curves: tuple[GainCurve, ...]


@dataclass(frozen=True)
class DeviceSpec:
    """How to build a device: per-element peak gains and defects.

    ``peak_gains`` None draws each element's peak from the system range with
    ``seed``. ``defects`` maps element labels to jump lists; ``random_defects``
    adds that many random point defects per trial device inside the target band.
    """

    seed: int = 0
    peak_gains: tuple[float, ...] | None = None
    defects: tuple[tuple[str, tuple[tuple[float, float], ...]], ...] = ()
    random_defects: int = 0

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "peak_gains": None if self.peak_gains is None else list(self.peak_gains),
            "defects": [{"label": lab, "jumps": [list(j) for j in jumps]} for lab, jumps in self.defects],
            "random_defects": self.random_defects,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DeviceSpec":
        try:
            pg = obj.get("peak_gains")
            return cls(
                int(obj.get("seed", 0)),
                None if pg is None else tuple(float(g) for g in pg),
                tuple((str(d["label"]), tuple((float(f), float(g)) for f, g in d["jumps"]))
                      for d in obj.get("defects", [])),
                int(obj.get("random_defects", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed device spec: {exc}") from exc


def build_device(design: ArrayDesign, plan: StitchPlan, spec: DeviceSpec = DeviceSpec(),
                 grid=STANDARD_GRID) -> Device:
    n = len(design.elements)
    if spec.peak_gains is not None:
        if len(spec.peak_gains) != n:
            raise ConfigError(f"{len(spec.peak_gains)} peak gains for {n} elements")
        gains = list(spec.peak_gains)
    else:
        gains = [system_peak_gain(spec.seed, i) for i in range(n)]
    design = design.with_peak_gains(gains)
    jumps = {lab: list(j) for lab, j in spec.defects}
    if spec.random_defects:
        rnd = DefectModel.random(design.target_range, spec.random_defects, spec.seed, grid)
        for f, g in rnd.jumps:
            owner = plan.bin_owner(np.array([f]))[0]
            label = plan.segments[owner].label if owner >= 0 else design.elements[0].label
            jumps.setdefault(label, []).append((f, g))
    curves = []
    for e in design.elements:
        curve = synth_gain_curve(None, e.peak_gain, grid, band=e.band)
        if e.label in jumps:
            curve = inject_defects(curve, DefectModel(tuple(jumps[e.label])))
        curves.append(curve)
    return Device(design, plan, tuple(curves))


def calibration_reference(seed: int, rate: int = 16000, segment: int = CALIBRATION_SEGMENT) -> AudioBuffer:
    """White noise long enough for the Welch estimate."""
    rng = np.random.default_rng([seed, 0xCA1B])
    return AudioBuffer(rng.standard_normal(CALIBRATION_MIN_SEGMENTS * segment), rate)


def calibration_capture(device: Device, channel: ChannelModel, seed: int,
                        rate: int = 16000) -> tuple[MultiChannelCapture, AudioBuffer]:
    """Close-range white-noise recording and the excitation as it reached the array.

    The excitation is quantised to PCM16 before capture so that the pair
    survives a WAV round trip bit for bit.
    """
    model = ChannelModel(channel.ref_distance, channel.ref_distance, CALIBRATION_LEVEL, None,
                         channel.mic_self_noise_level, channel.calibration, channel.quantize)
    at_array = propagate(calibration_reference(seed, rate), model)
    at_array = AudioBuffer(quantize(at_array.samples)[0], rate)
    # level of the quantised excitation itself, so propagation leaves it unscaled
    model = replace(model, source_level=float(rms_to_spl(at_array.rms, model.calibration)))
    cap = capture_multichannel(at_array, model, device.curves, hash_seed(seed, 0xCA1B), device.design, device.plan)
    return cap, at_array


def calibrate(device: Device, channel: ChannelModel, seed: int, rate: int = 16000) -> list[GainCurve]:
    """Estimate every element's curve from a close-range white-noise recording."""
    cap, ref = calibration_capture(device, channel, seed, rate)
    return estimate_gain_curves(cap, ref)


@dataclass(frozen=True)
class Scenario:
    channel: ChannelModel = ChannelModel()
    pipeline: PipelineConfig = PipelineConfig()
    device: DeviceSpec = DeviceSpec()
    design: ArrayDesign = field(default_factory=canonical_array)
    plan: StitchPlan | None = None
    mode: str = "pipeline"  # or "bare"
    source_kind: str = "harmonic_voice"  # any synth_test_signal kind, or "wav"
    source_path: str | None = None
    duration: float = 1.0
    rate: int = 16000
    seed: int = 0
    mfcc: MfccConfig = MfccConfig()

    @property
    def stitch_plan(self) -> StitchPlan:
        return self.plan or default_plan(self.design)


@dataclass
class PreparedScenario:
    scenario: Scenario
    device: Device | None
    estimated: list[GainCurve] | None


def prepare(scenario: Scenario) -> PreparedScenario:
    if scenario.mode == "bare":
        return PreparedScenario(scenario, None, None)
    if scenario.mode != "pipeline":
        raise ConfigError(f"unknown mode {scenario.mode!r}")
    device = build_device(scenario.design, scenario.stitch_plan, scenario.device)
    est = calibrate(device, scenario.channel, calibration_seed(scenario), scenario.rate) \
        if scenario.pipeline.enable_distortion_suppression else None
    return PreparedScenario(scenario, device, est)


def calibration_seed(scenario: Scenario) -> int:
    return hash_seed(scenario.seed, scenario.device.seed)


def trial_source(scenario: Scenario, trial: int) -> AudioBuffer:
    """Source for one trial; synthetic kinds are re-seeded per trial, a WAV is reused."""
    if scenario.source_kind == "wav":
        if scenario.source_path is None:
            raise ConfigError("source kind 'wav' needs a path")
        audio = read_wav(scenario.source_path)
        if audio.sample_rate != scenario.rate:
            raise RateMismatch(f"{scenario.source_path} is {audio.sample_rate} Hz, expected {scenario.rate} Hz")
        return audio
    return synth_test_signal(scenario.source_kind, scenario.duration, scenario.rate,
                             seed=hash_seed(scenario.seed, trial, 0x50C))


@dataclass
class TrialResult:
    report: EvalReport
    reference: AudioBuffer
    output: AudioBuffer
    diagnostics: object = None


def run_trial(prepared: PreparedScenario, distance: float, trial: int, keep_audio: bool = False) -> TrialResult:
    sc = prepared.scenario
    model = sc.channel.at(distance)
    source = trial_source(sc, trial)
    seed = hash_seed(sc.seed, int(round(distance * 1000)), trial)
    truth = propagate(source, model)
    if sc.mode == "bare":
        raw = bare_microphone_capture(source, model, seed)
        band = [sc.design.target_range]
        out = band_limit(raw, band)
        diag = None
    else:
        dev = prepared.device
        cap = capture_multichannel(source, model, dev.curves, seed, dev.design, dev.plan)
        silence = AudioBuffer(np.zeros(int(round(NOISE_REF_SECONDS * sc.rate))), sc.rate)
        noise = capture_multichannel(silence, model, dev.curves, hash_seed(seed, 0x7015E), dev.design, dev.plan)
        out, diag = run_pipeline(cap, noise, prepared.estimated, replace(sc.pipeline, stitch_plan=dev.plan))
        band = diag.plan.covered()
    reference = band_limit(truth, band)
    report = EvalReport(snr_db(reference, out), mcd(reference, out, sc.mfcc), distance=distance, trial=trial)
    if diag is not None:
        for name, buf in diag.stages.items():
            report.stage_metrics[name] = (snr_db(reference, buf), mcd(reference, buf, sc.mfcc))
    if keep_audio:
        return TrialResult(report, reference, out, diag)
    return TrialResult(report, None, None, None)


def _run_chunk(args):
    prepared, jobs = args
    return [run_trial(prepared, d, t).report for d, t in jobs]


@dataclass
class SweepResult:
    distances: list[float]
    reports: list[EvalReport]
    trials: int

    def rates(self) -> list[float]:
        out = []
        for d in self.distances:
            rs = [r for r in self.reports if r.distance == d]
            out.append(sum(r.success for r in rs) / len(rs))
        return out

    def mean_mcd(self) -> list[float]:
        return [float(np.mean([r.mcd for r in self.reports if r.distance == d])) for d in self.distances]

    def rsa(self, threshold: float = 0.8) -> float:
        return rsa_from_rates(self.distances, self.rates(), threshold)

    def to_csv(self) -> str:
        from .metrics import CSV_HEADER

        return "\n".join([CSV_HEADER, *(r.csv_row() for r in self.reports)]) + "\n"


def sweep(scenario: Scenario, distances=DEFAULT_DISTANCES, trials: int = 30, jobs: int = 1,
          prepared: PreparedScenario | None = None) -> SweepResult:
    """Every (distance, trial) pair; parallel runs give the same reports in the same order."""
    distances = [float(d) for d in distances]
    prepared = prepared or prepare(scenario)
    work = [(d, t) for d in distances for t in range(trials)]
    if jobs <= 1:
        reports = [run_trial(prepared, d, t).report for d, t in work]
    else:
        chunks = [work[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, [(prepared, c) for c in chunks]))
        by_key = {}
        for chunk, part in zip(chunks, parts):
            for key, rep in zip(chunk, part):
                by_key[key] = rep
        reports = [by_key[k] for k in work]
    return SweepResult(distances, reports, trials)


# -- configuration files --------------------------------------------------------


def published_defaults(seed: int = 0) -> dict:
    """The published constants as one experiment configuration."""
    design = canonical_array()
    return {
        "schema": SCHEMA_VERSION,
        "array": design_to_json(design, default_plan(design)),
        "channel": ChannelModel(1.0).to_json(),
        "noise": _noise_to_json(NoiseProfile.lab()),
        "pipeline": PipelineConfig().to_json(),
        "device": DeviceSpec(seed=seed, defects=(("(4)", ((563.0, 1500.0),)),)).to_json(),
        "source": {"kind": "harmonic_voice", "duration_s": 1.0, "rate_hz": 16000},
        "mode": "pipeline",
        "seed": seed,
        "distances_m": list(DEFAULT_DISTANCES),
        "trials": 30,
    }


def _noise_to_json(profile: NoiseProfile | None):
    if profile is None:
        return None
    return {"band_hz": list(profile.band), "level_db": profile.level, "seed": profile.seed}


def _noise_from_json(obj) -> NoiseProfile | None:
    if obj is None:
        return None
    return NoiseProfile((float(obj["band_hz"][0]), float(obj["band_hz"][1])), float(obj["level_db"]),
                        int(obj.get("seed", 0)))


def scenario_from_config(cfg: dict, seed: int | None = None, base_dir=None) -> tuple[Scenario, list[float], int]:
    """Build a scenario from a config dict; relative WAV paths resolve against ``base_dir``."""
    if not isinstance(cfg, dict) or cfg.get("schema") != SCHEMA_VERSION:
        schema = cfg.get("schema") if isinstance(cfg, dict) else None
        raise ConfigError(f"unsupported or missing config schema {schema!r}")
    try:
        design, plan = design_from_json(cfg["array"])
        channel = ChannelModel.from_json(cfg.get("channel", {}))
        if "noise" in cfg:
            channel = channel.with_ambient(_noise_from_json(cfg["noise"]))
        pipeline = PipelineConfig.from_json(cfg.get("pipeline", {}), plan)
        device = DeviceSpec.from_json(cfg.get("device", {}))
        src = cfg.get("source", {})
        kind = str(src.get("kind", "harmonic_voice"))
        path = src.get("path")
        if path is not None:
            path = Path(base_dir or ".") / path
            if not path.is_file():
                raise ConfigError(f"source file {path} does not exist")
            path = str(path)
        s = int(cfg.get("seed", 0)) if seed is None else int(seed)
        scenario = Scenario(channel, pipeline, device, design, plan, str(cfg.get("mode", "pipeline")),
                            kind, path, float(src.get("duration_s", 1.0)), int(src.get("rate_hz", 16000)), s)
        distances = [float(d) for d in cfg.get("distances_m", DEFAULT_DISTANCES)]
        trials = int(cfg.get("trials", 30))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"malformed experiment config: {exc}") from exc
    if scenario.mode not in ("pipeline", "bare"):
        raise ConfigError(f"unknown mode {scenario.mode!r}")
    if trials < 1 or not distances:
        raise ConfigError("need at least one trial and one distance")
    return scenario, distances, trials


def load_config(path) -> dict:
    """Read a JSON config; I/O failures propagate as ``OSError``."""
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

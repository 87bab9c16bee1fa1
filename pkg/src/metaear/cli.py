"""Command-line entry point.

Exit codes: 0 success, 2 configuration or domain error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .arraydesign import (
    TARGET_RANGE,
    canonical_array,
    compute_cut_points,
    coverage_optimizer,
    default_plan,
    design_from_bands,
    design_from_json,
    design_to_json,
    validate_coverage,
)
from .audio_io import AudioBuffer, read_wav, write_wav
from .capture import MultiChannelCapture, propagate
from .errors import ConfigError, CorruptWav, MetaEarError, UnsupportedFormat
from .experiment import (
    DeviceSpec,
    Scenario,
    build_device,
    calibration_capture,
    calibration_seed,
    published_defaults,
    scenario_from_config,
    sweep,
    trial_source,
)
from .gainmodel import STANDARD_GRID, TABLE1, synth_gain_curve
from .metrics import MfccConfig, mcd, snr_db
from .reconstruct import band_limit, distortion_curves, estimate_gain_curves, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3
U64_MAX = 2**64 - 1
MANIFEST = "manifest.json"


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_scenario(args) -> tuple[Scenario, list[float], int]:
    if args.config:
        path = Path(args.config)
        with open(path) as fh:
            try:
                cfg = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        base = path.parent
    else:
        cfg, base = published_defaults(), None
    scenario, distances, trials = scenario_from_config(cfg, args.seed, base)
    pipe = scenario.pipeline
    if getattr(args, "no_noise_suppression", False):
        pipe = replace(pipe, enable_noise_suppression=False)
    if getattr(args, "no_distortion_suppression", False):
        pipe = replace(pipe, enable_distortion_suppression=False)
    if getattr(args, "no_residual_denoise", False):
        pipe = replace(pipe, enable_residual_denoise=False)
    return replace(scenario, pipeline=pipe), distances, trials


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- design -------------------------------------------------------------------


def _candidates(args) -> list[tuple[float, float]]:
    if args.candidates == "table1":
        rows = [band for label, _, _, band in TABLE1 if label not in set(args.exclude)]
    else:
        with open(args.candidates) as fh:
            try:
                rows = [tuple(map(float, b)) for b in json.load(fh)["bands_hz"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"{args.candidates}: expected {{\"bands_hz\": [[lo, hi], ...]}}") from exc
    return [((lo + hi) / 2, hi - lo) for lo, hi in rows]


def cmd_design(args) -> int:
    target = tuple(args.target)
    if not target[0] < target[1]:
        raise ConfigError("target range must satisfy lo < hi")
    out = _out_dir(args)
    bands = coverage_optimizer(target, _candidates(args))
    design = design_from_bands(bands, target)
    report = validate_coverage(design)
    plan = None
    if [e.band for e in design.elements] == [e.band for e in canonical_array().elements] and target == TARGET_RANGE:
        plan = default_plan(design)
    else:
        try:
            curves = [synth_gain_curve(None, e.peak_gain, STANDARD_GRID, band=e.band) for e in design.elements]
            plan = compute_cut_points(curves, design)
        except MetaEarError:
            plan = None  # bands off the standard grid: no stitch plan
    _write_json(out / "design.json", design_to_json(design, plan))
    _write_json(out / "coverage.json", report.to_json())
    print(f"{len(design.elements)} elements: " + ", ".join(f"{e.label} {e.band[0]:g}-{e.band[1]:g} Hz"
                                                        for e in design.elements))
    return EXIT_OK if report.ok else EXIT_CONFIG


# -- gain-curve ---------------------------------------------------------------


def _parse_defect(text: str) -> tuple[str, float, float]:
    try:
        label, freq, gain = text.rsplit(":", 2)
        return label, float(freq), float(gain)
    except ValueError:
        raise argparse.ArgumentTypeError(f"defect must look like LABEL:FREQ_HZ:GAIN, got {text!r}")


def cmd_gain_curve(args) -> int:
    scenario, _, _ = _load_scenario(args)
    design, plan = scenario.design, scenario.stitch_plan
    if args.array:
        with open(args.array) as fh:
            design, p = design_from_json(json.load(fh))
        plan = p or default_plan(design)
    jumps: dict[str, list[tuple[float, float]]] = {lab: list(j) for lab, j in scenario.device.defects}
    if args.no_config_defects:
        jumps = {}
    for label, f, g in args.defect:
        design.index(label)
        jumps.setdefault(label, []).append((f, g))
    spec = DeviceSpec(scenario.device.seed, tuple(e.peak_gain for e in design.elements),
                      tuple((lab, tuple(j)) for lab, j in jumps.items()))
    device = build_device(design, plan, spec)
    states = distortion_curves(device.curves, plan, design, scenario.pipeline)
    out = _out_dir(args)
    header = ["freq_hz", *(f"gain_{e.label}" for e in design.elements), "gain_raw", "gain_smoothed", "gain_balanced"]
    cols = [states.raw.freqs, *(c.gains for c in device.curves), states.raw.gains, states.smoothed.gains,
            states.balanced.gains]
    lines = [",".join(header)]
    for row in zip(*cols):
        lines.append(",".join(repr(float(v)) for v in row))
    (out / "gain_curves.csv").write_text("\n".join(lines) + "\n")
    print(f"smoothing passes: {states.passes}; raw max {states.raw.gains.max():.1f}, "
          f"smoothed max {states.smoothed.gains.max():.1f}")
    return EXIT_OK


# -- simulate -----------------------------------------------------------------


def _write_capture(directory: Path, cap: MultiChannelCapture) -> list[str]:
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, ch in enumerate(cap.channels, 1):
        name = f"capture_ch{i}.wav"
        write_wav(directory / name, ch)
        names.append(name)
    return names


def _read_capture(directory: Path, files, design, plan) -> MultiChannelCapture:
    chans = tuple(read_wav(directory / f) for f in files)
    return MultiChannelCapture(chans, design, plan, ())


def cmd_simulate(args) -> int:
    scenario, _, _ = _load_scenario(args)
    if scenario.mode != "pipeline":
        raise ConfigError("simulate needs mode 'pipeline'")
    distance = scenario.channel.distance if args.distance is None else args.distance
    model = scenario.channel.at(distance)
    if args.input:
        scenario = replace(scenario, source_kind="wav", source_path=args.input)
    out = _out_dir(args)
    device = build_device(scenario.design, scenario.stitch_plan, scenario.device)
    from .capture import capture_multichannel, hash_seed
    from .experiment import NOISE_REF_SECONDS

    cal, cal_ref = calibration_capture(device, scenario.channel, calibration_seed(scenario), scenario.rate)
    source = trial_source(scenario, args.trial)
    seed = hash_seed(scenario.seed, int(round(distance * 1000)), args.trial)
    cap = capture_multichannel(source, model, device.curves, seed, device.design, device.plan)
    silence = AudioBuffer(np.zeros(int(round(NOISE_REF_SECONDS * scenario.rate))), scenario.rate)
    noise = capture_multichannel(silence, model, device.curves, hash_seed(seed, 0x7015E), device.design, device.plan)
    manifest = {
        "schema": 1,
        "seed": scenario.seed,
        "trial": args.trial,
        "sample_rate": scenario.rate,
        "array": design_to_json(device.design, device.plan),
        "channel": model.to_json(),
        "calibration": {"files": _write_capture(out / "calibration", cal), "reference": "reference.wav"},
        "signal": {"files": _write_capture(out / "signal", cap), "clipped": cap.clipped},
        "noise": {"files": _write_capture(out / "noise", noise)},
        "source": "source.wav",
        "truth": "truth.wav",
    }
    write_wav(out / "calibration" / "reference.wav", cal_ref)
    write_wav(out / "source.wav", source)
    write_wav(out / "truth.wav", propagate(source, model))
    _write_json(out / "signal" / MANIFEST, manifest)
    print(f"wrote {len(cap.channels)}-channel capture at {distance:g} m to {out}")
    return EXIT_OK


# -- pipeline -----------------------------------------------------------------


def cmd_pipeline(args) -> int:
    root = Path(args.capture)
    mpath = root / "signal" / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no capture manifest at {mpath}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptWav(f"{mpath}: {exc}") from exc
    scenario, _, _ = _load_scenario(args)
    config = scenario.pipeline
    try:
        design, plan = design_from_json(manifest["array"])
        sig_files = manifest["signal"]["files"]
        noise_files = manifest["noise"]["files"]
        cal_files = manifest["calibration"]["files"]
        cal_ref_name = manifest["calibration"]["reference"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{mpath}: malformed manifest ({exc})") from exc
    plan = plan or default_plan(design)
    cap = _read_capture(root / "signal", sig_files, design, plan)
    noise = _read_capture(root / "noise", noise_files, design, plan)
    est = None
    if config.enable_distortion_suppression:
        cal = _read_capture(root / "calibration", cal_files, design, plan)
        est = estimate_gain_curves(cal, read_wav(root / "calibration" / cal_ref_name))
    out_audio, diag = run_pipeline(cap, noise, est, replace(config, stitch_plan=plan))
    out = _out_dir(args)
    write_wav(out / "reconstructed.wav", out_audio)
    for name, buf in diag.stages.items():
        write_wav(out / f"stage_{name}.wav", buf)
    if diag.curves is not None:
        (out / "curves.csv").write_text(diag.curves.to_csv())
    report = {
        "plan": [[s.lo, s.hi, s.label] for s in diag.plan.segments],
        "noise_band_hz": None if diag.noise_band is None else [diag.noise_band.lo, diag.noise_band.hi],
        "isolated": list(diag.isolated),
        "smoothing_passes": None if diag.curves is None else diag.curves.passes,
    }
    truth_name = manifest.get("truth")
    if truth_name and (root / truth_name).is_file():
        ref = band_limit(read_wav(root / truth_name), diag.plan.covered())
        report["mcd"] = mcd(ref, out_audio, MfccConfig())
        report["snr_db"] = snr_db(ref, out_audio)
        report["stages"] = {k: {"mcd": mcd(ref, b), "snr_db": snr_db(ref, b)} for k, b in diag.stages.items()}
        print(f"MCD {report['mcd']:.3f}  SNR {report['snr_db']:.2f} dB")
    _write_json(out / "report.json", report)
    return EXIT_OK


# -- evaluate / sweep ---------------------------------------------------------


def cmd_sweep(args) -> int:
    scenario, distances, trials = _load_scenario(args)
    if args.mode:
        scenario = replace(scenario, mode=args.mode)
    if getattr(args, "distance", None) is not None:
        distances = [args.distance]
    elif args.distances:
        distances = args.distances
    if args.trials is not None:
        trials = args.trials
    if trials < 1:
        raise ConfigError("need at least one trial")
    result = sweep(scenario, distances, trials, jobs=args.jobs)
    out = _out_dir(args)
    (out / "sweep.csv").write_text(result.to_csv())
    summary = {
        "mode": scenario.mode,
        "seed": scenario.seed,
        "trials": trials,
        "distances_m": result.distances,
        "success_rate": result.rates(),
        "mean_mcd": result.mean_mcd(),
        "rsa_m": result.rsa(),
    }
    _write_json(out / "summary.json", summary)
    for d, r, m in zip(result.distances, summary["success_rate"], summary["mean_mcd"]):
        print(f"{d:6.2f} m  success {r:5.2f}  mean MCD {m:6.2f}")
    print(f"RSA {summary['rsa_m']:g} m")
    return EXIT_OK


def cmd_defaults(args) -> int:
    out = _out_dir(args)
    _write_json(out / "config.json", published_defaults(0 if args.seed is None else args.seed))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (default: built-in published constants)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")
    stages = argparse.ArgumentParser(add_help=False)
    stages.add_argument("--no-noise-suppression", action="store_true")
    stages.add_argument("--no-distortion-suppression", action="store_true")
    stages.add_argument("--no-residual-denoise", action="store_true")

    p = argparse.ArgumentParser(prog="metaear", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", parents=[common], help="choose resonator bands covering a target range")
    d.add_argument("--target", nargs=2, type=float, default=list(TARGET_RANGE), metavar=("LO", "HI"))
    d.add_argument("--candidates", default="table1", help="'table1' or a JSON file with bands_hz")
    d.add_argument("--exclude", action="append", default=[], metavar="LABEL", help="drop a reference-table row")
    d.set_defaults(func=cmd_design)

    g = sub.add_parser("gain-curve", parents=[common, stages], help="export element and composite gain curves")
    g.add_argument("--array", help="array design JSON")
    g.add_argument("--defect", type=_parse_defect, action="append", default=[], metavar="LABEL:HZ:GAIN")
    g.add_argument("--no-config-defects", action="store_true", help="ignore defects listed in the config")
    g.set_defaults(func=cmd_gain_curve)

    s = sub.add_parser("simulate", parents=[common], help="simulate calibration, noise and signal captures")
    s.add_argument("--input", help="mono PCM16 WAV source instead of the synthetic one")
    s.add_argument("--distance", type=float, help="source distance in metres")
    s.add_argument("--trial", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("pipeline", parents=[common, stages], help="reconstruct a simulated capture")
    r.add_argument("--capture", required=True, help="directory written by 'simulate'")
    r.set_defaults(func=cmd_pipeline)

    for name, helptext in (("sweep", "trials over the config's distance grid"),
                           ("evaluate", "trials at one distance")):
        e = sub.add_parser(name, parents=[common, stages], help=helptext)
        e.add_argument("--mode", choices=["pipeline", "bare"])
        e.add_argument("--trials", type=int)
        e.add_argument("--jobs", type=int, default=1, help="worker processes")
        if name == "sweep":
            e.add_argument("--distances", type=float, nargs="+")
        else:
            e.add_argument("--distance", type=float, required=True)
            e.set_defaults(distances=None)
        e.set_defaults(func=cmd_sweep)

    c = sub.add_parser("defaults", parents=[common], help="write the published-constants config")
    c.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors count as configuration errors
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        return args.func(args)
    except (CorruptWav, UnsupportedFormat, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MetaEarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

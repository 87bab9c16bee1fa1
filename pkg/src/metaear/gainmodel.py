"""Single-resonator model: geometry, resonance, bandwidth and gain curves.

The geometric model follows the staged scaling law for coiled-channel Mie
resonators: scaling outer diameter ``D`` and path width ``a`` together moves
the resonance, with a piecewise constant correction factor per size stage.
The eight canonical geometries and their measured enhancement bands are kept
in :data:`TABLE1`; those bands, not the scaling law, are authoritative for
the canonical array.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    GridTooNarrow,
    InvalidCurve,
    InvalidGeometry,
    JumpOutsideGrid,
    NonPositiveInput,
    NonProportional,
    OutOfDomain,
    UnknownSpec,
)

BASE_FREQUENCY = 563.0  # Hz, baseline element resonance
BASE_DIAMETER = 80.0  # mm
BASE_PATH_WIDTH = 3.2  # mm
BASE_TURNS = 8
PATH_RATIO = BASE_PATH_WIDTH / BASE_DIAMETER  # a / D = 0.04
PROPORTION_TOL = 0.01

# (lower bound inclusive, upper bound exclusive, k); the last stage is closed at 170
K_STAGES = (
    (40.0, 60.0, 1.89),
    (60.0, 100.0, 1.25),
    (100.0, 140.0, 0.99),
    (140.0, 170.0, 0.87),
)
D_MIN, D_MAX = 40.0, 170.0

# label, a (mm), D (mm), enhancement band (Hz)
TABLE1 = (
    ("(1)", 2.0, 50.0, (820.0, 1000.0)),
    ("(2)", 2.4, 60.0, (720.0, 880.0)),
    ("(3)", 2.8, 70.0, (580.0, 730.0)),
    ("(4)", 3.2, 80.0, (520.0, 660.0)),
    ("(5)", 4.0, 100.0, (430.0, 550.0)),
    ("(6)", 4.8, 120.0, (350.0, 440.0)),
    ("(7)", 5.6, 140.0, (290.0, 360.0)),
    ("(8)", 6.4, 160.0, (250.0, 320.0)),
)

BASELINE_PEAK_GAIN = 16.0
SYSTEM_PEAK_GAIN_RANGE = (15.0, 22.0)

# Standard analysis grid: 0 .. 8 kHz in fs/2048 steps at 16 kHz.
STANDARD_GRID = (0.0, 16000.0 / 2048, 1025)


def _table_centers_widths() -> tuple[np.ndarray, np.ndarray]:
    pairs = sorted(((lo + hi) / 2, hi - lo) for _, _, _, (lo, hi) in TABLE1)
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


TABLE1_CENTERS, TABLE1_WIDTHS = _table_centers_widths()


@dataclass(frozen=True)
class PhysicalConstants:
    rho: float = 1.21  # kg/m^3
    c: float = 343.0  # m/s

    def __post_init__(self):
        if not (self.rho > 0 and self.c > 0):
            raise NonPositiveInput("rho and c must be positive")


@dataclass(frozen=True)
class MetamaterialSpec:
    """Resonator geometry in millimetres.

    ``t`` and ``d`` default to the baseline element's wall thickness and inner
    diameter scaled with ``D``.
    """

    D: float
    a: float
    N: int = BASE_TURNS
    t: float | None = None
    d: float | None = None

    def __post_init__(self):
        if self.t is None:
            object.__setattr__(self, "t", 0.8 * self.D / BASE_DIAMETER)
        if self.d is None:
            object.__setattr__(self, "d", 14.0 * self.D / BASE_DIAMETER)
        if not (self.D > 0 and self.a > 0 and self.t > 0):
            raise InvalidGeometry(f"non-positive dimension in {self}")
        if self.N < 1:
            raise InvalidGeometry("N must be >= 1")
        if not (0 <= self.d < self.D):
            raise InvalidGeometry(f"inner diameter {self.d} must be below D={self.D}")

    def check_domain(self) -> None:
        if not (D_MIN <= self.D <= D_MAX):
            raise OutOfDomain(f"D={self.D} mm outside [{D_MIN}, {D_MAX}]")

    def check_proportional(self) -> None:
        dev = abs(self.a / self.D - PATH_RATIO) / PATH_RATIO
        if dev > PROPORTION_TOL:
            raise NonProportional(f"a/D={self.a / self.D:.4f} deviates {dev:.1%} from {PATH_RATIO}")


def stage_factor(D: float) -> float:
    """Piecewise constant ``k`` of the four-stage resonance law."""
    for lo, hi, k in K_STAGES:
        if lo <= D < hi or (hi == D_MAX and D == D_MAX):
            return k
    raise OutOfDomain(f"D={D} mm outside [{D_MIN}, {D_MAX}]")


def resonant_center_frequency(spec: MetamaterialSpec) -> float:
    """Resonance predicted by the staged scaling law.

    The size ratio is the scalar ``D0 / D``; for proportional geometries this
    equals ``a0 / a``. Non-proportional geometries are rejected.
    """
    spec.check_domain()
    spec.check_proportional()
    return stage_factor(spec.D) * BASE_FREQUENCY * (BASE_DIAMETER / spec.D)


def table1_row(spec: MetamaterialSpec):
    for row in TABLE1:
        _, a, D, _ = row
        if abs(spec.D - D) <= PROPORTION_TOL * D and abs(spec.a - a) <= PROPORTION_TOL * a:
            return row
    return None


def table1_spec(label: str) -> MetamaterialSpec:
    for lab, a, D, _ in TABLE1:
        if lab == label:
            return MetamaterialSpec(D=D, a=a)
    raise UnknownSpec(f"no reference-table row labelled {label!r}")


def interpolated_center(D: float) -> float:
    """Center frequency from linear interpolation over the reference-table (D, center) pairs.

    Outside the tabulated diameters the end segments are extrapolated.
    """
    # TABLE1 runs from the smallest D upwards
    Ds = np.array([row[2] for row in TABLE1])
    cs = np.array([(row[3][0] + row[3][1]) / 2 for row in TABLE1])
    if D < Ds[0]:
        return float(cs[0] + (D - Ds[0]) * (cs[1] - cs[0]) / (Ds[1] - Ds[0]))
    if D > Ds[-1]:
        return float(cs[-1] + (D - Ds[-1]) * (cs[-1] - cs[-2]) / (Ds[-1] - Ds[-2]))
    return float(np.interp(D, Ds, cs))


def bandwidth_model(center: float) -> float:
    """Enhancement bandwidth (Hz) at a given center frequency.

    Piecewise linear through the eight reference-table (center, width) pairs, held
    constant beyond the end points. Defined on [200, 1200] Hz.
    """
    if not (200.0 <= center <= 1200.0):
        raise OutOfDomain(f"center {center} Hz outside [200, 1200]")
    return float(np.interp(center, TABLE1_CENTERS, TABLE1_WIDTHS))


def declared_band(spec: MetamaterialSpec, interpolate: bool = False) -> tuple[float, float]:
    row = table1_row(spec)
    if row is not None:
        return row[3]
    if not interpolate:
        raise UnknownSpec(f"D={spec.D}, a={spec.a} is not a reference-table geometry")
    spec.check_domain()
    spec.check_proportional()
    fc = interpolated_center(spec.D)
    width = bandwidth_model(min(max(fc, 200.0), 1200.0))
    return (fc - width / 2, fc + width / 2)


def refractive_index(spec: MetamaterialSpec) -> float:
    """Coiled over straight path length, Archimedean spiral approximation.

    The coiled path is taken as ``N`` turns of mean circumference
    ``pi (D + d) / 2``; the straight path is the radial gap ``(D - d) / 2``.
    """
    coiled = spec.N * math.pi * (spec.D + spec.d) / 2
    straight = (spec.D - spec.d) / 2
    return coiled / straight


def mie_pressure_gain(P0: float, n_r: float, lambda0: float,
                      constants: PhysicalConstants = PhysicalConstants()) -> float:
    """Output pressure ``P0 * (n_r / lambda0) * sqrt(2 rho c^2 / lambda0^2)``, SI units.

    Reference implementation of the printed formula only; the result is not
    dimensionally a pressure and the simulator does not use it.
    """
    if not (P0 > 0 and n_r > 0 and lambda0 > 0):
        raise NonPositiveInput("P0, n_r and lambda0 must be positive")
    return P0 * (n_r / lambda0) * math.sqrt(2 * constants.rho * constants.c**2 / lambda0**2)


@dataclass(frozen=True, eq=False)
class GainCurve:
    """Linear gain multipliers on a uniform frequency grid."""

    freq_lo: float
    freq_step: float
    gains: np.ndarray = field(repr=False)

    def __post_init__(self):
        g = np.array(self.gains, dtype=np.float64)
        if self.freq_step <= 0:
            raise InvalidCurve("freq_step must be positive")
        if g.ndim != 1 or g.size < 3:
            raise InvalidCurve("a gain curve needs at least 3 bins")
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise InvalidCurve("gains must be finite and non-negative")
        g.setflags(write=False)
        object.__setattr__(self, "gains", g)

    @classmethod
    def on_grid(cls, grid: tuple[float, float, int], gains) -> "GainCurve":
        return cls(grid[0], grid[1], gains)

    @property
    def grid(self) -> tuple[float, float, int]:
        return (self.freq_lo, self.freq_step, len(self.gains))

    @property
    def freqs(self) -> np.ndarray:
        return self.freq_lo + self.freq_step * np.arange(len(self.gains))

    @property
    def freq_hi(self) -> float:
        return self.freq_lo + self.freq_step * (len(self.gains) - 1)

    def __len__(self) -> int:
        return len(self.gains)

    def with_gains(self, gains) -> "GainCurve":
        return GainCurve(self.freq_lo, self.freq_step, gains)

    def nearest_index(self, freq: float) -> int:
        return int(np.clip(np.round((freq - self.freq_lo) / self.freq_step), 0, len(self) - 1))

    def at(self, freqs) -> np.ndarray:
        """Linearly interpolated gain; 1 outside the grid."""
        return np.interp(freqs, self.freqs, self.gains, left=1.0, right=1.0)

    def same_grid(self, other: "GainCurve") -> bool:
        return (self.freq_lo, self.freq_step, len(self)) == (other.freq_lo, other.freq_step, len(other))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["freq_hz", "gain"])
        for f, g in zip(self.freqs, self.gains):
            w.writerow([repr(float(f)), repr(float(g))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GainCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["freq_hz", "gain"]:
            raise InvalidCurve("expected header freq_hz,gain")
        f = np.array([float(r[0]) for r in rows[1:]])
        g = np.array([float(r[1]) for r in rows[1:]])
        if f.size < 3:
            raise InvalidCurve("a gain curve needs at least 3 bins")
        step = f[1] - f[0]
        if not np.allclose(np.diff(f), step, rtol=1e-9, atol=1e-9):
            raise InvalidCurve("frequency grid is not uniform")
        return cls(float(f[0]), float(step), g)

    def to_json(self) -> dict:
        return {"freq_lo": self.freq_lo, "freq_step": self.freq_step, "gains": self.gains.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "GainCurve":
        return cls(obj["freq_lo"], obj["freq_step"], obj["gains"])


@dataclass(frozen=True)
class DefectModel:
    """Point gain jumps, ``(frequency Hz, linear gain)`` pairs applied in order."""

    jumps: tuple[tuple[float, float], ...] = ()
    seed: int = 0

    def __post_init__(self):
        jumps = tuple((float(f), float(g)) for f, g in self.jumps)
        for _, g in jumps:
            if not g > 0:
                raise NonPositiveInput("jump gains must be positive")
        object.__setattr__(self, "jumps", jumps)

    @classmethod
    def random(cls, band: tuple[float, float], count: int, seed: int,
               grid: tuple[float, float, int] = STANDARD_GRID,
               gain_range: tuple[float, float] = (1500.0, 3000.0)) -> "DefectModel":
        """Isolated point defects at distinct, non-adjacent grid bins inside ``band``."""
        rng = np.random.default_rng([seed, 0xDEFEC7])
        lo, step, n = grid
        first = int(np.ceil((band[0] - lo) / step))
        last = min(int(np.floor((band[1] - lo) / step)), n - 1)
        chosen: list[int] = []
        candidates = np.arange(first, last + 1)
        while len(chosen) < count:
            i = int(rng.choice(candidates))
            if all(abs(i - j) >= 2 for j in chosen):
                chosen.append(i)
        gains = rng.uniform(*gain_range, size=count)
        return cls(tuple((lo + i * step, float(g)) for i, g in zip(chosen, gains)), seed)


def system_peak_gain(seed: int, index: int) -> float:
    """Per-element peak gain drawn uniformly from the system range."""
    rng = np.random.default_rng([seed, index, 0x9A1])
    return float(rng.uniform(*SYSTEM_PEAK_GAIN_RANGE))


def lorentzian(freqs, center: float, width: float, peak_gain: float) -> np.ndarray:
    """``1 + (g - 1) / (1 + (2 (f - fc) / B)^2)``: peak ``g`` at ``fc``, ``(g + 1) / 2`` at ``fc +- B/2``."""
    x = 2.0 * (np.asarray(freqs, dtype=np.float64) - center) / width
    return 1.0 + (peak_gain - 1.0) / (1.0 + x * x)


def synth_gain_curve(spec: MetamaterialSpec | None, peak_gain: float,
                     grid: tuple[float, float, int] = STANDARD_GRID,
                     band: tuple[float, float] | None = None,
                     interpolate: bool = False) -> GainCurve:
    """Lorentzian gain curve with half-gain points on the declared band edges."""
    if peak_gain < 1:
        raise NonPositiveInput("peak gain must be >= 1")
    if band is None:
        if spec is None:
            raise InvalidGeometry("need a spec or an explicit band")
        band = declared_band(spec, interpolate=interpolate)
    lo, step, n = grid
    hi = lo + step * (n - 1)
    if band[0] < lo or band[1] > hi:
        raise GridTooNarrow(f"grid [{lo}, {hi}] does not cover band {band}")
    freqs = lo + step * np.arange(n)
    center = (band[0] + band[1]) / 2
    return GainCurve(lo, step, lorentzian(freqs, center, band[1] - band[0], peak_gain))


def inject_defects(curve: GainCurve, defects: DefectModel) -> GainCurve:
    """Overwrite the nearest grid bin of each jump; later jumps win on shared bins."""
    g = curve.gains.copy()
    half = curve.freq_step / 2
    for f, gain in defects.jumps:
        if not (curve.freq_lo - half <= f <= curve.freq_hi + half):
            raise JumpOutsideGrid(f"jump at {f} Hz outside [{curve.freq_lo}, {curve.freq_hi}]")
        g[curve.nearest_index(f)] = gain
    return curve.with_gains(g)

"""Multi-resonator systems: canonical array, stitch plans and band coverage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DisjointBands, MetaEarError, Uncoverable
from .gainmodel import BASELINE_PEAK_GAIN, TABLE1, MetamaterialSpec

TARGET_RANGE = (250.0, 1000.0)
PUBLISHED_CUTS = (320.0, 360.0, 430.0, 520.0, 620.0, 700.0, 860.0)
ELEMENT_THICKNESS_MM = 15.0
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Element:
    label: str
    spec: MetamaterialSpec
    band: tuple[float, float]
    peak_gain: float = BASELINE_PEAK_GAIN


@dataclass(frozen=True)
class ArrayDesign:
    elements: tuple[Element, ...]
    target_range: tuple[float, float] = TARGET_RANGE

    def __post_init__(self):
        els = tuple(sorted(self.elements, key=lambda e: e.band[0]))
        object.__setattr__(self, "elements", els)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.elements]

    @property
    def stack_height_mm(self) -> float:
        return ELEMENT_THICKNESS_MM * len(self.elements)

    def element(self, label: str) -> Element:
        return self.elements[self.index(label)]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise ConfigError(f"no element labelled {label!r}") from None

    def without(self, *labels: str) -> "ArrayDesign":
        return ArrayDesign(tuple(e for e in self.elements if e.label not in labels), self.target_range)

    def with_peak_gains(self, gains) -> "ArrayDesign":
        els = tuple(Element(e.label, e.spec, e.band, float(g)) for e, g in zip(self.elements, gains))
        return ArrayDesign(els, self.target_range)


@dataclass(frozen=True)
class Segment:
    lo: float
    hi: float
    label: str


@dataclass(frozen=True)
class StitchPlan:
    """Half-open frequency segments ``[lo, hi)``, each sourced from one element.

    The final segment of a plan also owns its upper edge.
    """

    segments: tuple[Segment, ...] = field(default_factory=tuple)

    @property
    def cut_freqs(self) -> list[float]:
        return [s.lo for s in self.segments[1:]]

    @property
    def labels(self) -> list[str]:
        return [s.label for s in self.segments]

    @property
    def span(self) -> tuple[float, float]:
        return (self.segments[0].lo, self.segments[-1].hi)

    def is_partition_of(self, lo: float, hi: float) -> bool:
        if not self.segments:
            return False
        if self.segments[0].lo != lo or self.segments[-1].hi != hi:
            return False
        return all(a.hi == b.lo and a.lo < a.hi for a, b in zip(self.segments, self.segments[1:])) \
            and self.segments[-1].lo < self.segments[-1].hi

    def covered(self) -> list[tuple[float, float]]:
        """Merged intervals covered by the plan."""
        out: list[list[float]] = []
        for s in self.segments:
            if out and out[-1][1] == s.lo:
                out[-1][1] = s.hi
            else:
                out.append([s.lo, s.hi])
        return [tuple(iv) for iv in out]

    def band_violations(self, design: ArrayDesign) -> list[Segment]:
        """Segments reaching outside their element's declared band."""
        bands = {e.label: e.band for e in design.elements}
        return [s for s in self.segments if s.lo < bands[s.label][0] or s.hi > bands[s.label][1]]

    def bin_owner(self, freqs: np.ndarray) -> np.ndarray:
        """Index of the owning segment for each frequency, -1 where uncovered."""
        owner = np.full(len(freqs), -1, dtype=np.int64)
        last = len(self.segments) - 1
        for k, s in enumerate(self.segments):
            mask = (freqs >= s.lo) & ((freqs < s.hi) if k < last else (freqs <= s.hi))
            owner[mask & (owner < 0)] = k
        return owner


def canonical_array(peak_gains=None) -> ArrayDesign:
    """The eight reference-table resonators over 250-1000 Hz."""
    els = []
    for i, (label, a, D, band) in enumerate(TABLE1):
        g = BASELINE_PEAK_GAIN if peak_gains is None else float(peak_gains[i])
        els.append(Element(label, MetamaterialSpec(D=D, a=a), band, g))
    return ArrayDesign(tuple(els), TARGET_RANGE)


def plan_from_cuts(design: ArrayDesign, cuts) -> StitchPlan:
    cuts = [float(c) for c in cuts]
    if len(cuts) != len(design.elements) - 1:
        raise ConfigError(f"{len(design.elements)} elements need {len(design.elements) - 1} cuts, got {len(cuts)}")
    edges = [design.target_range[0], *cuts, design.target_range[1]]
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigError(f"cut frequencies must increase strictly inside the target range: {edges}")
    return StitchPlan(tuple(Segment(lo, hi, e.label) for lo, hi, e in zip(edges, edges[1:], design.elements)))


def default_plan(design: ArrayDesign | None = None) -> StitchPlan:
    """The fabricated system's published crop points over the canonical array."""
    return plan_from_cuts(design or canonical_array(), PUBLISHED_CUTS)


def full_band_plan(label: str, lo: float, hi: float) -> StitchPlan:
    return StitchPlan((Segment(lo, hi, label),))


def compute_cut_points(curves, design: ArrayDesign) -> StitchPlan:
    """Cut each adjacent overlap where the two element curves cross.

    Within the overlap of adjacent declared bands the cut is the grid
    frequency maximising ``min(G_left, G_right)``, i.e. the hand-over point of
    the upper envelope of the two curves. Ties go to the lower frequency;
    touching bands are cut at the shared edge.
    """
    curves = list(curves)
    if len(curves) != len(design.elements):
        raise ConfigError("one gain curve per element is required")
    if any(not c.same_grid(curves[0]) for c in curves):
        raise ConfigError("gain curves must share one grid")
    freqs = curves[0].freqs
    cuts = []
    for k in range(len(design.elements) - 1):
        left, right = design.elements[k], design.elements[k + 1]
        lo, hi = right.band[0], left.band[1]
        if hi < lo:
            raise DisjointBands(f"{left.label} {left.band} and {right.label} {right.band} do not touch")
        if hi == lo:
            cuts.append(lo)
            continue
        idx = np.nonzero((freqs >= lo) & (freqs <= hi))[0]
        if idx.size == 0:
            cuts.append(lo)
            continue
        score = np.minimum(curves[k].gains[idx], curves[k + 1].gains[idx])
        cuts.append(float(freqs[idx[int(np.argmax(score))]]))
    return plan_from_cuts(design, cuts)


@dataclass(frozen=True)
class CoverageReport:
    gaps: list[tuple[float, float]]
    overlaps: list[tuple[float, float]]

    @property
    def ok(self) -> bool:
        return not self.gaps

    def to_json(self) -> dict:
        return {"ok": self.ok, "gaps": [list(g) for g in self.gaps], "overlaps": [list(o) for o in self.overlaps]}


def _merge(intervals) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for lo, hi in sorted(intervals):
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [tuple(iv) for iv in out]


def validate_coverage(design: ArrayDesign) -> CoverageReport:
    lo, hi = design.target_range
    bands = [(max(lo, a), min(hi, b)) for a, b in (e.band for e in design.elements) if b > lo and a < hi]
    union = _merge(bands)
    gaps = []
    cursor = lo
    for a, b in union:
        if a > cursor:
            gaps.append((cursor, a))
        cursor = max(cursor, b)
    if cursor < hi:
        gaps.append((cursor, hi))
    overlaps = []
    for i in range(len(bands)):
        for j in range(i + 1, len(bands)):
            a, b = max(bands[i][0], bands[j][0]), min(bands[i][1], bands[j][1])
            if a < b:
                overlaps.append((a, b))
    return CoverageReport(gaps, _merge(overlaps))


def coverage_optimizer(target: tuple[float, float], candidates) -> list[tuple[float, float]]:
    """Greedy minimum-cardinality interval cover of ``target``.

    ``candidates`` are ``(center, width)`` pairs describing closed bands
    ``[center - width/2, center + width/2]``. At each step the band that
    starts at or before the covered frontier and reaches furthest is taken.
    Returns the chosen bands in order.
    """
    bands = [(c - w / 2, c + w / 2) for c, w in candidates]
    if not bands:
        raise MetaEarError("no candidate bands")
    lo, hi = target
    frontier = lo
    chosen: list[tuple[float, float]] = []
    while True:
        reach, pick = frontier, None
        for band in bands:
            if band[0] <= frontier and band[1] > reach:
                reach, pick = band[1], band
        if pick is None:
            raise Uncoverable(frontier)
        chosen.append(pick)
        frontier = reach
        if frontier >= hi:
            return chosen


def table1_candidates() -> list[tuple[float, float]]:
    return [((lo + hi) / 2, hi - lo) for *_, (lo, hi) in TABLE1]


def design_from_bands(bands, target=TARGET_RANGE) -> ArrayDesign:
    """ArrayDesign for a chosen band list; geometry comes from the reference table when it matches."""
    from .gainmodel import interpolated_center

    table = {band: (label, a, D) for label, a, D, band in TABLE1}
    Ds = np.array([row[2] for row in TABLE1])[::-1]  # ascending centers
    cs = np.array([interpolated_center(D) for D in Ds])
    els = []
    for i, band in enumerate(sorted(bands)):
        band = (float(band[0]), float(band[1]))
        if band in table:
            label, a, D = table[band]
        else:
            center = (band[0] + band[1]) / 2
            # invert the monotone D -> center map
            D = float(np.interp(center, cs, Ds))
            a = 0.04 * D
            label = f"c{i + 1}"
        els.append(Element(label, MetamaterialSpec(D=D, a=a), band))
    return ArrayDesign(tuple(els), target)


def design_to_json(design: ArrayDesign, plan: StitchPlan | None = None) -> dict:
    out = {
        "schema": SCHEMA_VERSION,
        "target_hz": list(design.target_range),
        "elements": [
            {"label": e.label, "D_mm": e.spec.D, "a_mm": e.spec.a, "band_hz": list(e.band), "peak_gain": e.peak_gain}
            for e in design.elements
        ],
    }
    if plan is not None:
        out["cuts_hz"] = plan.cut_freqs
    return out


def design_from_json(obj: dict) -> tuple[ArrayDesign, StitchPlan | None]:
    try:
        els = tuple(
            Element(str(e["label"]), MetamaterialSpec(D=float(e["D_mm"]), a=float(e["a_mm"])),
                    (float(e["band_hz"][0]), float(e["band_hz"][1])), float(e.get("peak_gain", BASELINE_PEAK_GAIN)))
            for e in obj["elements"]
        )
        design = ArrayDesign(els, tuple(float(x) for x in obj["target_hz"]))
    except (KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"malformed array design: {exc}") from exc
    plan = plan_from_cuts(design, obj["cuts_hz"]) if "cuts_hz" in obj else None
    return design, plan


def dumps(design: ArrayDesign, plan: StitchPlan | None = None) -> str:
    return json.dumps(design_to_json(design, plan), indent=2)

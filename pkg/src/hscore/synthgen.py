"""Deterministic synthetic tiles with planted nuclei.

Nuclei are flat, uniformly coloured disks without anti-aliasing, so the patch
mean under the reference profile's sampling square is exactly the planted
colour and every downstream stage has an exact expected output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import COMPARTMENTS, STAIN_CLASSES
from .calibration import CalibrationItem, CalibrationSet
from .errors import CapacityError, DomainError
from .imaging import Tile, hsv_to_rgb, rgb_to_hsv
from .keypoints import Keypoint
from .staining import ClassCounts, StainProfile, compute_hscore, stain_from_hsv

BLUE_HUE = 220.0
BROWN_HUE = 30.0
REFERENCE_LEFT = 80
REFERENCE_RIGHT = 120
BAND_MARGIN = 5

DEFAULT_PALETTE = {
    "none": (BLUE_HUE, 150.0, 170.0),
    "weak": (BROWN_HUE, 150.0, 160.0),
    "moderate": (BROWN_HUE, 150.0, 100.0),
    "strong": (BROWN_HUE, 150.0, 50.0),
}


def reference_half_side(radius: int) -> int:
    """Largest sampling half-side whose square stays inside a disk of ``radius``."""
    return max(0, int(math.floor((radius - 1) / math.sqrt(2))))


def reference_profile(radius: int = 15, left: float = REFERENCE_LEFT,
                      right: float = REFERENCE_RIGHT) -> StainProfile:
    return StainProfile(
        annotator_id="synthgen-reference",
        hue_split=(BROWN_HUE + BLUE_HUE) / 2.0,
        value_left=float(left),
        value_right=float(right),
        nucleus_half_side=reference_half_side(radius),
        created_utc="1970-01-01T00:00:00Z",
        objective=0.0,
    )


def _mix(fracs, names):
    f = tuple(float(v) for v in fracs)
    if len(f) != len(names) or min(f) < 0 or abs(sum(f) - 1.0) > 1e-9:
        raise DomainError(f"mix over {names} must be {len(names)} non-negative fractions summing to 1")
    return f


def split_counts(n: int, fracs) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier class."""
    raw = [n * f for f in fracs]
    base = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(base)
    order = sorted(range(len(fracs)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


@dataclass(frozen=True)
class SynthSpec:
    size: int = 512
    n_nuclei: int = 50
    compartment_mix: tuple = (0.5, 0.5)
    class_mix: tuple = (0.25, 0.25, 0.25, 0.25)
    # Optional per-compartment override of class_mix.
    class_mix_by_compartment: dict | None = None
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    # Optional inclusive integer V range per class; V is then drawn per nucleus.
    value_ranges: dict | None = None
    # V values forced onto the first nuclei of a class, in every compartment.
    value_pins: dict | None = None
    nucleus_radius: int = 15
    min_separation: float | None = None
    background: tuple = (230, 222, 214)
    seed: int = 0
    attempts_per_nucleus: int = 10_000
    color_jitter: float = 0.0
    reference: StainProfile | None = None

    def __post_init__(self):
        if self.size < 1 or self.n_nuclei < 0 or self.nucleus_radius < 1:
            raise DomainError("size and nucleus_radius must be positive, n_nuclei >= 0")
        _mix(self.compartment_mix, COMPARTMENTS)
        _mix(self.class_mix, STAIN_CLASSES)
        for mix in (self.class_mix_by_compartment or {}).values():
            _mix(mix, STAIN_CLASSES)
        if self.separation <= 2 * self.nucleus_radius:
            raise DomainError("min_separation must exceed twice the nucleus radius")
        self._check_palette()

    @property
    def separation(self) -> float:
        if self.min_separation is None:
            return 2.0 * self.nucleus_radius + 2.0
        return float(self.min_separation)

    @property
    def profile(self) -> StainProfile:
        return self.reference or reference_profile(self.nucleus_radius)

    def _bands(self):
        p = self.profile
        return {
            "strong": (0, p.value_left - BAND_MARGIN),
            "moderate": (p.value_left + BAND_MARGIN, p.value_right - BAND_MARGIN),
            "weak": (p.value_right + BAND_MARGIN, 255),
        }

    def _check_palette(self):
        bands = self._bands()
        for stain in STAIN_CLASSES:
            hue, sat, val = self.palette[stain]
            vals = [val]
            if self.value_ranges and stain in self.value_ranges:
                vals = list(self.value_ranges[stain])
            vals += list((self.value_pins or {}).get(stain, ()))
            for v in vals:
                rgb = _rgb(hue, sat, v)
                got = stain_from_hsv(rgb_to_hsv(rgb), self.profile)
                if got != stain:
                    raise DomainError(
                        f"palette colour for {stain!r} (V={v}) classifies as {got!r} "
                        f"under the reference profile")
                if stain in bands:
                    lo, hi = bands[stain]
                    if not lo <= v <= hi:
                        raise DomainError(f"V={v} for {stain!r} is within {BAND_MARGIN} of a "
                                          f"reference threshold")


def _rgb(hue, sat, val) -> tuple[int, int, int]:
    r, g, b = hsv_to_rgb(hue, sat, val)
    return int(round(r)), int(round(g)), int(round(b))


@dataclass
class SynthTile:
    tile: Tile
    keypoints: list[Keypoint]
    counts: ClassCounts
    hscores: dict


def _place(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    r = spec.nucleus_radius
    lo, hi = r, spec.size - 1 - r
    if hi < lo and spec.n_nuclei:
        raise CapacityError(f"tile size {spec.size} cannot hold a nucleus of radius {r}")
    sep2 = spec.separation ** 2
    pts = np.empty((0, 2))
    for i in range(spec.n_nuclei):
        for _ in range(spec.attempts_per_nucleus):
            c = rng.integers(lo, hi + 1, size=2).astype(np.float64)
            if not len(pts) or np.min(np.sum((pts - c) ** 2, axis=1)) >= sep2:
                pts = np.vstack([pts, c])
                break
        else:
            raise CapacityError(
                f"could not place nucleus {i + 1}/{spec.n_nuclei} with min separation "
                f"{spec.separation} px in a {spec.size} px tile after "
                f"{spec.attempts_per_nucleus} attempts")
    return pts


def _draw_disk(img, cx, cy, r, color, rng=None, jitter=0.0):
    h, w = img.shape[:2]
    y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
    x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    region = img[y0:y1, x0:x1]
    if jitter > 0:
        noise = rng.normal(0.0, jitter, size=(int(mask.sum()), 3))
        region[mask] = np.clip(np.asarray(color) + noise, 0, 255).round().astype(np.uint8)
    else:
        region[mask] = color


def generate_tile(spec: SynthSpec, tile_id: str = "tile0", slide_id: str = "synth") -> SynthTile:
    rng = np.random.default_rng(spec.seed)
    centers = _place(spec, rng)
    comp_counts = split_counts(spec.n_nuclei, spec.compartment_mix)
    labels = []
    for comp, n_c in zip(COMPARTMENTS, comp_counts):
        mix = (spec.class_mix_by_compartment or {}).get(comp, spec.class_mix)
        for stain, k in zip(STAIN_CLASSES, split_counts(n_c, mix)):
            labels.extend([(comp, stain)] * k)
    order = rng.permutation(len(labels))
    labels = [labels[i] for i in order]

    img = np.empty((spec.size, spec.size, 3), dtype=np.uint8)
    img[:] = spec.background
    keypoints = []
    counts = ClassCounts()
    pins_used: dict[tuple[str, str], int] = {}
    for (cx, cy), (comp, stain) in zip(centers, labels):
        hue, sat, val = spec.palette[stain]
        pins = (spec.value_pins or {}).get(stain, ())
        used = pins_used.get((comp, stain), 0)
        if used < len(pins):
            val = pins[used]
            pins_used[(comp, stain)] = used + 1
        elif spec.value_ranges and stain in spec.value_ranges:
            lo, hi = spec.value_ranges[stain]
            val = int(rng.integers(int(lo), int(hi) + 1))
        _draw_disk(img, int(cx), int(cy), spec.nucleus_radius, _rgb(hue, sat, val), rng,
                   spec.color_jitter)
        keypoints.append(Keypoint(float(cx), float(cy), comp, 1.0, stain))
        counts.add(comp, stain)
    tile = Tile(img, 100.0 / spec.size, slide_id, (0, 0), tile_id, spec.size)
    return SynthTile(tile, keypoints, counts, compute_hscore(counts))


def tile_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_slide(spec: SynthSpec, n_tiles: int, slide_id: str = "synth") -> list[SynthTile]:
    """``n_tiles`` independent tiles with seeds derived from ``spec.seed``."""
    return [generate_tile(replace(spec, seed=s), f"{slide_id}_t{i:03d}", slide_id)
            for i, s in enumerate(tile_seeds(spec.seed, n_tiles))]


def stitch(tiles: list[SynthTile], cols: int):
    """Lay tiles out on a raster grid; returns the raster and keypoints per tile origin."""
    size = tiles[0].tile.width
    rows = math.ceil(len(tiles) / cols)
    raster = np.empty((rows * size, cols * size, 3), dtype=np.uint8)
    raster[:] = tiles[0].tile.image[0, 0]
    placed = {}
    for i, st in enumerate(tiles):
        r, c = divmod(i, cols)
        raster[r * size:(r + 1) * size, c * size:(c + 1) * size] = st.tile.image
        placed[(c * size, r * size)] = st
    return raster, placed


def pooled_expectation(tiles: list[SynthTile]) -> tuple[ClassCounts, dict]:
    total = ClassCounts()
    for st in tiles:
        total = total.merge(st.counts)
    return total, compute_hscore(total)


def calibration_set(left: int = REFERENCE_LEFT, right: int = REFERENCE_RIGHT, slides: int = 4,
                    tiles_per_slide: int = 5, nuclei: int = 40, seed: int = 0,
                    radius: int = 15, annotator_id: str = "synthetic") -> CalibrationSet:
    """Calibration set whose unique lexicographic optimum is ``(left, right)``.

    V values are drawn at least 5 away from both thresholds. Every slide's
    stroma has no weak nuclei and includes a strong nucleus at ``left - 5``;
    every epithelium includes a moderate nucleus at ``right - 5``. Any pair
    lexicographically smaller than the planted one then strictly lowers at
    least one H-score, while larger equivalent pairs lose the tie-break.
    Model keypoints coincide with the annotator's.
    """
    if right - left < 2 * BAND_MARGIN:
        raise DomainError("planted thresholds need right - left >= 10")
    profile = reference_profile(radius, left, right)
    ranges = {
        "strong": (max(5, left - 40), left - BAND_MARGIN),
        "moderate": (left + BAND_MARGIN, right - BAND_MARGIN),
        "weak": (right + BAND_MARGIN, min(250, right + 40)),
    }
    pins = {"strong": (left - BAND_MARGIN,), "moderate": (right - BAND_MARGIN,)}
    items = []
    rng = np.random.default_rng(seed)
    for s in range(slides):
        sid = f"slide{s + 1}"
        stroma_mix = rng.dirichlet(np.ones(3))
        stroma_mix = (stroma_mix[0], 0.0, stroma_mix[1], stroma_mix[2])
        epi_mix = tuple(rng.dirichlet(np.ones(4)))
        spec = SynthSpec(
            n_nuclei=nuclei,
            class_mix_by_compartment={"stroma": _ensure(stroma_mix, (3,), nuclei // 2),
                                      "epithelium": _ensure(epi_mix, (2,), nuclei - nuclei // 2)},
            value_ranges=ranges,
            value_pins=pins,
            nucleus_radius=radius,
            reference=profile,
            seed=int(rng.integers(2 ** 32)),
        )
        for st in generate_slide(spec, tiles_per_slide, sid):
            items.append(CalibrationItem(st.tile, st.keypoints, [replace(k, label=None)
                                                                 for k in st.keypoints]))
    return CalibrationSet(items, annotator_id)


def _ensure(mix, required, n):
    """Fractions for ``n`` nuclei giving every class in ``required`` at least one nucleus."""
    counts = split_counts(n, mix)
    for i in required:
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return tuple(c / n for c in counts)

"""Nucleus stain classification and per-compartment H-scores.

A nucleus is first split into blue (unstained) or brown (stained) by hue,
then brown nuclei are graded by the HSV value of their patch mean: darker
means stronger staining. The H-score of a compartment is
``100 * (1*f_weak + 2*f_moderate + 3*f_strong)`` with fractions taken over
all nuclei of that compartment, unstained included.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import COMPARTMENTS, STAIN_CLASSES, __version__
from .errors import DomainError
from .imaging import Tile, as_rgb, patch_mean, rgb_to_hsv

STAIN_WEIGHTS = {"none": 0, "weak": 1, "moderate": 2, "strong": 3}
HUE_BINS = 360


@dataclass(frozen=True)
class StainProfile:
    """Per-annotator thresholds.

    ``value_left`` divides strong from moderate, ``value_right`` moderate from
    weak. Hues with ``(hue_split - hue) mod 360 < 180`` are brown; the other
    half circle is blue.
    """

    annotator_id: str
    hue_split: float
    value_left: float
    value_right: float
    nucleus_half_side: int
    created_utc: str = ""
    objective: float | None = None

    def __post_init__(self):
        if not 0 <= self.hue_split < 360:
            raise DomainError(f"hue_split must lie in [0, 360), got {self.hue_split}")
        if not (0 <= self.value_left < self.value_right <= 255):
            raise DomainError(
                f"need 0 <= value_left < value_right <= 255, got {self.value_left}, {self.value_right}")
        if self.nucleus_half_side < 0:
            raise DomainError("nucleus_half_side must be >= 0")


def is_brown(hue: float, hue_split: float) -> bool:
    return (hue_split - hue) % 360.0 < 180.0


def _peak_bin(hues) -> int:
    bins = np.rint(np.asarray(hues, dtype=np.float64)).astype(np.int64) % HUE_BINS
    return int(np.argmax(np.bincount(bins, minlength=HUE_BINS)))


def estimate_hue_split(blue_hues, brown_hues) -> float:
    """Midpoint between the brown and blue hue-histogram peaks.

    Histograms use 1-degree bins centred on integer degrees. The midpoint is
    taken on the arc running counter-clockwise from the brown peak to the blue
    peak, which is the orientation :func:`is_brown` expects.
    """
    if len(blue_hues) == 0 or len(brown_hues) == 0:
        raise DomainError("both hue samples must be non-empty")
    brown = _peak_bin(brown_hues)
    blue = _peak_bin(blue_hues)
    return (brown + ((blue - brown) % 360) / 2.0) % 360.0


def measure_nucleus(image, keypoint, half_side: int) -> tuple[float, float, float]:
    return rgb_to_hsv(patch_mean(image, (keypoint.x, keypoint.y), half_side))


def stain_from_hsv(hsv, profile: StainProfile) -> str:
    hue, _, value = hsv
    if not is_brown(hue, profile.hue_split):
        return "none"
    if value < profile.value_left:
        return "strong"
    if value < profile.value_right:
        return "moderate"
    return "weak"


def classify_nucleus(image, keypoint, profile: StainProfile) -> str:
    return stain_from_hsv(measure_nucleus(image, keypoint, profile.nucleus_half_side), profile)


@dataclass
class ClassCounts:
    """Stain class counts per compartment, in ``STAIN_CLASSES`` order."""

    counts: dict[str, list[int]] = field(
        default_factory=lambda: {c: [0, 0, 0, 0] for c in COMPARTMENTS})

    @classmethod
    def from_mapping(cls, mapping) -> "ClassCounts":
        out = cls()
        for comp, row in mapping.items():
            row = [int(v) for v in row]
            if len(row) != 4 or min(row) < 0:
                raise DomainError(f"counts for {comp} must be four non-negative integers")
            out.counts[comp] = row
        return out

    def add(self, compartment: str, stain: str, n: int = 1) -> None:
        if stain not in STAIN_WEIGHTS:
            raise DomainError(f"unknown stain class {stain!r}")
        row = self.counts.setdefault(compartment, [0, 0, 0, 0])
        row[STAIN_CLASSES.index(stain)] += n

    def merge(self, other: "ClassCounts") -> "ClassCounts":
        out = ClassCounts({c: list(r) for c, r in self.counts.items()})
        for comp, row in other.counts.items():
            acc = out.counts.setdefault(comp, [0, 0, 0, 0])
            for i, v in enumerate(row):
                acc[i] += v
        return out

    def total(self, compartment: str) -> int:
        return sum(self.counts.get(compartment, ()))


def hscore_from_row(row) -> float | None:
    """H-score of one compartment's ``(none, weak, moderate, strong)`` counts.

    ``None`` marks an empty compartment.
    """
    total = sum(row)
    if total == 0:
        return None
    weighted = row[1] + 2 * row[2] + 3 * row[3]
    return 100.0 * weighted / total


def compute_hscore(counts: ClassCounts) -> dict[str, float | None]:
    return {comp: hscore_from_row(row) for comp, row in counts.counts.items()}


@dataclass
class HScoreReport:
    counts: ClassCounts
    provenance: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def hscores(self) -> dict[str, float | None]:
        return compute_hscore(self.counts)

    def compartment(self, name: str) -> dict:
        row = self.counts.counts.get(name, [0, 0, 0, 0])
        total = sum(row)
        h = hscore_from_row(row)
        return {
            "compartment": name,
            "counts": dict(zip(STAIN_CLASSES, row)),
            "total": total,
            "fractions": dict(zip(STAIN_CLASSES, (v / total for v in row))) if total else None,
            "empty": total == 0,
            "hscore": h,
        }

    def to_dict(self) -> dict:
        return {
            "tool": "hscore",
            "version": __version__,
            "provenance": self.provenance,
            "compartments": [self.compartment(c) for c in self.counts.counts],
            "params": self.params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"


def _tile_counts(image, keypoints, profile: StainProfile, where: str) -> ClassCounts:
    counts = ClassCounts()
    for kp in keypoints:
        try:
            stain = classify_nucleus(image, kp, profile)
        except DomainError as exc:
            raise DomainError(f"{where}: {exc}") from exc
        counts.add(kp.cls, stain)
    return counts


def score_tiles(items, profile: StainProfile, threads: int = 1, provenance=None,
                params=None) -> HScoreReport:
    """Classify every keypoint and pool the counts over all tiles.

    ``items`` yields ``(tile, keypoints)`` pairs; ``tile`` may be a
    :class:`Tile` or a bare RGB array. The H-score is computed once over the
    pooled counts, not averaged per tile.
    """
    items = list(items)

    def work(pair):
        tile, kps = pair
        if isinstance(tile, Tile):
            image, where = tile.image, f"tile {tile.slide_id}/{tile.tile_id}"
        else:
            image, where = as_rgb(tile), "tile"
        return _tile_counts(image, kps, profile, where)

    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(work, items))
    else:
        partials = [work(p) for p in items]
    total = ClassCounts()
    for part in partials:  # fixed order; integer sums keep runs bit-identical
        total = total.merge(part)
    prov = {"profile": profile.annotator_id, "tiles": len(items)}
    if provenance:
        prov.update(provenance)
    return HScoreReport(total, prov, dict(params or {}))

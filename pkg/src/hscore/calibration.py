"""Per-annotator Value-threshold calibration and profile files.

For every admissible ``(left, right)`` pair on the grid, model keypoints are
classified with the candidate thresholds and their per-slide, per-compartment
H-scores are compared with the H-scores implied by the annotator's own stain
labels. The pair with the smallest mean absolute deviation wins; ties go to
the smallest ``left`` and then the smallest ``right``.
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import COMPARTMENTS
from .errors import DomainError, InputError
from .imaging import Tile
from .staining import ClassCounts, StainProfile, hscore_from_row, is_brown, measure_nucleus

PROFILE_KEYS = ("annotator_id", "hue_split_deg", "value_left", "value_right",
                "nucleus_half_side_px", "created_utc", "objective")


@dataclass(frozen=True)
class GridSpec:
    lo: int = 40
    hi: int = 160
    step: int = 5

    def __post_init__(self):
        if not (0 <= self.lo < self.hi <= 255):
            raise DomainError(f"grid needs 0 <= lo < hi <= 255, got lo={self.lo}, hi={self.hi}")
        if self.step < 1:
            raise DomainError("grid step must be a positive integer")

    def values(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1, self.step, dtype=np.int64)


@dataclass
class CalibrationItem:
    tile: Tile
    reference: list  # annotator keypoints, each with a stain label
    predicted: list  # model keypoints


@dataclass
class CalibrationSet:
    items: list[CalibrationItem]
    annotator_id: str = "annotator"

    def validate(self) -> None:
        if not self.items:
            raise DomainError("calibration set is empty")
        stained = 0
        for item in self.items:
            for kp in item.reference:
                if kp.label is None:
                    raise DomainError(
                        f"tile {item.tile.slide_id}/{item.tile.tile_id}: reference keypoint "
                        f"at ({kp.x}, {kp.y}) has no stain label")
                stained += kp.label != "none"
        if stained == 0:
            raise DomainError("calibration set contains no stained reference nucleus")

    def slides(self) -> list[str]:
        return sorted({it.tile.slide_id for it in self.items})

    def subset(self, slide_ids) -> "CalibrationSet":
        keep = set(slide_ids)
        return CalibrationSet([it for it in self.items if it.tile.slide_id in keep],
                              self.annotator_id)


@dataclass
class _Term:
    """One (slide, compartment) contribution to the objective."""

    reference_h: float
    n_total: int
    n_brown: int
    values: np.ndarray = field(default_factory=lambda: np.empty(0))  # sorted brown V


@dataclass
class CalibrationResult:
    profile: StainProfile
    objective: float
    grid: np.ndarray
    objectives: np.ndarray  # (len(grid), len(grid)); inf where left >= right


def _terms(cal: CalibrationSet, hue_split: float, half_side: int) -> list[_Term]:
    ref: dict[str, ClassCounts] = {}
    vals: dict[tuple[str, str], list[float]] = {}
    totals: dict[tuple[str, str], int] = {}
    for item in cal.items:
        sid = item.tile.slide_id
        counts = ref.setdefault(sid, ClassCounts())
        for kp in item.reference:
            counts.add(kp.cls, kp.label)
        for kp in item.predicted:
            try:
                hue, _, v = measure_nucleus(item.tile.image, kp, half_side)
            except DomainError as exc:
                raise DomainError(f"tile {sid}/{item.tile.tile_id}: {exc}") from exc
            key = (sid, kp.cls)
            totals[key] = totals.get(key, 0) + 1
            if is_brown(hue, hue_split):
                vals.setdefault(key, []).append(v)
    terms = []
    for sid in sorted(ref):
        for comp in COMPARTMENTS:
            h_ref = hscore_from_row(ref[sid].counts.get(comp, [0, 0, 0, 0]))
            n = totals.get((sid, comp), 0)
            if h_ref is None or n == 0:
                continue
            v = np.sort(np.asarray(vals.get((sid, comp), []), dtype=np.float64))
            terms.append(_Term(h_ref, n, len(v), v))
    return terms


def objective_grid(terms: list[_Term], grid: np.ndarray) -> np.ndarray:
    """Mean |H_model - H_ref| for every (left, right) pair; ``inf`` where left >= right."""
    g = grid.astype(np.float64)
    acc = np.zeros((len(g), len(g)))
    for t in terms:
        below = np.searchsorted(t.values, g, side="left")  # count of V < threshold
        # weak + 2*moderate + 3*strong simplifies to n_brown + below(right) + below(left)
        h = 100.0 * (t.n_brown + below[None, :] + below[:, None]) / t.n_total
        acc += np.abs(h - t.reference_h)
    obj = acc / len(terms)
    obj[~(g[:, None] < g[None, :])] = np.inf
    return obj


def calibrate_full(cal: CalibrationSet, grid: GridSpec | None = None, hue_split: float = 125.0,
                   nucleus_half_side: int = 12) -> CalibrationResult:
    grid = grid or GridSpec()
    cal.validate()
    values = grid.values()
    if len(values) < 2:
        raise DomainError("grid has no admissible (left < right) pair")
    terms = _terms(cal, hue_split, nucleus_half_side)
    if not terms:
        raise DomainError("no slide/compartment has both reference and model nuclei")
    obj = objective_grid(terms, values)
    best = np.min(obj)
    # Row-major scan order is (left asc, right asc): the first minimum is the tie-break winner.
    i, j = np.unravel_index(int(np.argmax(obj == best)), obj.shape)
    profile = StainProfile(
        annotator_id=cal.annotator_id,
        hue_split=float(hue_split),
        value_left=float(values[i]),
        value_right=float(values[j]),
        nucleus_half_side=int(nucleus_half_side),
        created_utc=_utc_now(),
        objective=float(best),
    )
    return CalibrationResult(profile, float(best), values, obj)


def calibrate(cal: CalibrationSet, grid: GridSpec | None = None, hue_split: float = 125.0,
              nucleus_half_side: int = 12) -> StainProfile:
    return calibrate_full(cal, grid, hue_split, nucleus_half_side).profile


def leave_one_slide_out(cal: CalibrationSet, grid: GridSpec | None = None,
                        hue_split: float = 125.0, nucleus_half_side: int = 12
                        ) -> dict[str, StainProfile]:
    """Thresholds for each slide fitted on all the other slides."""
    slides = cal.slides()
    if len(slides) < 2:
        raise DomainError("leave-one-slide-out needs at least two slides")
    out = {}
    for held_out in slides:
        train = cal.subset(s for s in slides if s != held_out)
        out[held_out] = calibrate(train, grid, hue_split, nucleus_half_side)
    return out


def _utc_now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch and epoch.isdigit() else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _num(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def format_profile(profile: StainProfile) -> str:
    obj = "" if profile.objective is None else repr(float(profile.objective))
    values = (profile.annotator_id, _num(profile.hue_split), _num(profile.value_left),
              _num(profile.value_right), str(int(profile.nucleus_half_side)),
              profile.created_utc, obj)
    return "".join(f"{k}={v}\n" for k, v in zip(PROFILE_KEYS, values))


def save_profile(profile: StainProfile, path) -> None:
    Path(path).write_bytes(format_profile(profile).encode("utf-8"))


def parse_profile(text: str, source: str = "<profile>") -> StainProfile:
    fields: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in PROFILE_KEYS:
            raise InputError(f"{source}:{lineno}: unknown field {key!r}")
        if key in fields:
            raise InputError(f"{source}:{lineno}: duplicate field {key!r}")
        fields[key] = (lineno, value.strip())
    for key in PROFILE_KEYS:
        if key not in fields:
            raise InputError(f"{source}: missing field {key!r}")

    def number(key, cast=float):
        lineno, raw = fields[key]
        try:
            v = cast(raw)
        except ValueError:
            raise InputError(f"{source}:{lineno}: field {key!r} is not a valid number: {raw!r}") from None
        if isinstance(v, float) and not math.isfinite(v):
            raise InputError(f"{source}:{lineno}: field {key!r} must be finite")
        return v

    obj_raw = fields["objective"][1]
    try:
        return StainProfile(
            annotator_id=fields["annotator_id"][1],
            hue_split=number("hue_split_deg"),
            value_left=number("value_left"),
            value_right=number("value_right"),
            nucleus_half_side=number("nucleus_half_side_px", int),
            created_utc=fields["created_utc"][1],
            objective=number("objective") if obj_raw else None,
        )
    except DomainError as exc:
        raise InputError(f"{source}: invalid profile: {exc}") from exc


def load_profile(path) -> StainProfile:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"profile not found: {path}")
    return parse_profile(path.read_bytes().decode("utf-8"), str(path))

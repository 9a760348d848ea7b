"""Keypoint TSV files.

One nucleus per row::

    slide_id <TAB> tile_id <TAB> x <TAB> y <TAB> class <TAB> confidence [<TAB> stain_label]

Lines starting with ``#`` are comments; writers use them to echo the
configuration that produced the file.
"""
from __future__ import annotations

import math
from pathlib import Path

from . import COMPARTMENTS, STAIN_CLASSES
from .errors import InputError
from .keypoints import Keypoint

COLUMNS = ("slide_id", "tile_id", "x", "y", "class", "confidence", "stain_label")


def format_rows(grouped) -> list[str]:
    lines = []
    for (slide, tile), kps in grouped.items():
        for kp in kps:
            row = [slide, tile, repr(float(kp.x)), repr(float(kp.y)), kp.cls, repr(float(kp.confidence))]
            if kp.label is not None:
                row.append(kp.label)
            lines.append("\t".join(row))
    return lines


def write_keypoints(path, grouped, comments=()) -> None:
    """Write ``{(slide_id, tile_id): [Keypoint, ...]}`` as TSV."""
    lines = [f"# {c}" for c in comments]
    lines.append("# " + "\t".join(COLUMNS))
    lines.extend(format_rows(grouped))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_keypoints(path, require_labels: bool = False) -> dict[tuple[str, str], list[Keypoint]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"keypoint file not found: {path}")
    grouped: dict[tuple[str, str], list[Keypoint]] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (6, 7):
                raise InputError(f"{path}:{lineno}: expected 6 or 7 tab-separated fields, "
                                 f"got {len(fields)}")
            slide, tile, xs, ys, cls, confs = fields[:6]
            label = fields[6] if len(fields) == 7 and fields[6] != "" else None
            try:
                x, y, conf = float(xs), float(ys), float(confs)
            except ValueError:
                raise InputError(f"{path}:{lineno}: x, y and confidence must be numbers") from None
            if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
                raise InputError(f"{path}:{lineno}: coordinates must be finite and non-negative")
            if not 0 <= conf <= 1:
                raise InputError(f"{path}:{lineno}: field 'confidence' must lie in [0, 1]")
            if cls not in COMPARTMENTS:
                raise InputError(f"{path}:{lineno}: field 'class' must be one of {COMPARTMENTS}, "
                                 f"got {cls!r}")
            if label is not None and label not in STAIN_CLASSES:
                raise InputError(f"{path}:{lineno}: field 'stain_label' must be one of "
                                 f"{STAIN_CLASSES}, got {label!r}")
            if require_labels and label is None:
                raise InputError(f"{path}:{lineno}: missing field 'stain_label'")
            grouped.setdefault((slide, tile), []).append(Keypoint(x, y, cls, conf, label))
    return grouped

"""Pipeline configuration: ``section.key=value`` text files plus flag overrides.

Keys left empty that describe a distance (``extractor.min_distance``,
``fuse.radius``, ``eval.match_radius``) fall back to ``nucleus_radius_px``.
"""
from __future__ import annotations

import math
from pathlib import Path

from . import __version__
from .errors import DomainError, InputError

# key -> (type, default, (lo, hi) inclusive or None)
SCHEMA: dict[str, tuple[type, object, tuple | None]] = {
    # Average nucleus radius in 512 px / 100 um tiles (~2.9 um).
    "nucleus_radius_px": (float, 15.0, (0.5, 1000.0)),
    "seed": (int, 0, (0, 2 ** 63 - 1)),
    "threads": (int, 1, (1, 1024)),
    "tile.fov_um": (float, 100.0, (1e-6, 1e9)),
    "tile.output_px": (int, 512, (1, 65536)),
    "tile.resize": (str, "bilinear", None),
    "tile.mean_low": (float, 10.0, (0.0, 255.0)),
    "tile.mean_high": (float, 235.0, (0.0, 255.0)),
    "tile.std_min": (float, 5.0, (0.0, 255.0)),
    "tile.grayscale": (str, "(R+G+B)/3", None),
    "split.ratios": (str, "3:1:1", None),
    "extractor.threshold": (float, 0.5, (0.0, 1.0)),
    "extractor.min_distance": (float, None, (0.0, 1e6)),
    "extractor.pool_size": (int, 3, (1, 1001)),
    "render.sigma": (float, 4.0, (1e-6, 1e6)),
    "fuse.radius": (float, None, (0.0, 1e6)),
    "stain.profile": (str, "", None),
    "stain.half_side_fraction": (float, 0.8, (0.0, 10.0)),
    "calibrate.grid_lo": (int, 40, (0, 255)),
    "calibrate.grid_hi": (int, 160, (0, 255)),
    "calibrate.grid_step": (int, 5, (1, 255)),
    "calibrate.hue_split": (float, 125.0, (0.0, 359.999999)),
    "calibrate.objective": (str, "mean_abs_deviation", None),
    "eval.match_radius": (float, None, (1e-9, 1e6)),
    "eval.batch_size": (int, 8, (1, 10 ** 9)),
    "bootstrap.resamples": (int, 10_000, (1, 10 ** 9)),
    "bootstrap.confidence": (float, 0.95, (1e-9, 1 - 1e-9)),
    "bootstrap.outer_repeats": (int, 10_000, (1, 10 ** 9)),
}

RADIUS_DEFAULTED = ("extractor.min_distance", "fuse.radius", "eval.match_radius")

# Execution settings that cannot change any output; left out of the echo so
# artifacts stay byte-identical across worker counts.
EXECUTION_KEYS = ("threads",)


def _coerce(key: str, raw, where: str):
    typ = SCHEMA[key][0]
    if raw is None:
        return None
    if typ is str:
        return str(raw)
    if isinstance(raw, str) and raw.strip() == "":
        return None
    try:
        value = typ(raw) if typ is not int else int(str(raw).strip())
    except ValueError:
        raise InputError(f"{where}: {key} expects {typ.__name__}, got {raw!r}") from None
    if isinstance(value, float) and not math.isfinite(value):
        raise InputError(f"{where}: {key} must be finite")
    return value


class PipelineConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: spec[1] for k, spec in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, raw, where: str = "override") -> None:
        if key not in SCHEMA:
            raise InputError(f"{where}: unknown config key {key!r}")
        self.values[key] = _coerce(key, raw, where)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        cfg = cls()
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value, f"{path}:{lineno}")
        return cfg

    def __getitem__(self, key: str):
        value = self.values[key]
        if value is None and key in RADIUS_DEFAULTED:
            return self.values["nucleus_radius_px"]
        return value

    def validate(self) -> None:
        for key, (typ, _, bounds) in SCHEMA.items():
            value = self[key]
            if bounds is not None and value is not None and not bounds[0] <= value <= bounds[1]:
                raise DomainError(f"config {key}={value} outside [{bounds[0]}, {bounds[1]}]")
        if self["tile.mean_low"] > self["tile.mean_high"]:
            raise DomainError("tile.mean_low must not exceed tile.mean_high")
        if self["calibrate.grid_lo"] >= self["calibrate.grid_hi"]:
            raise DomainError("calibrate.grid_lo must be below calibrate.grid_hi")
        if self["extractor.pool_size"] % 2 == 0:
            raise DomainError("extractor.pool_size must be odd")
        if self["tile.resize"] != "bilinear":
            raise DomainError("only bilinear tile resizing is supported")
        self.split_ratios()

    def split_ratios(self) -> tuple[int, int, int]:
        raw = self["split.ratios"]
        try:
            parts = tuple(int(p) for p in raw.split(":"))
        except ValueError:
            raise InputError(f"split.ratios must look like 3:1:1, got {raw!r}") from None
        if len(parts) != 3 or min(parts) < 0 or sum(parts) == 0:
            raise DomainError(f"split.ratios must be three non-negative integers, got {raw!r}")
        return parts

    def half_side(self) -> int:
        return int(math.floor(self["stain.half_side_fraction"] * self["nucleus_radius_px"]))

    def echo(self) -> list[str]:
        """Fully resolved configuration, one ``key=value`` per line, sorted."""
        lines = [f"tool=hscore {__version__}"]
        for key in self._echoed():
            value = self[key]
            lines.append(f"{key}={'' if value is None else value}")
        return lines

    def as_dict(self) -> dict:
        return {k: self[k] for k in self._echoed()}

    @staticmethod
    def _echoed() -> list[str]:
        return [k for k in sorted(SCHEMA) if k not in EXECUTION_KEYS]

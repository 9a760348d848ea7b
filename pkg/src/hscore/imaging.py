"""Pixel-space primitives: HSV conversion, micron-calibrated tiling,
empty-tile filtering and patch sampling around keypoints.

Images are ``uint8`` arrays of shape ``(height, width, 3)`` in RGB order.
Hue is expressed in degrees on ``[0, 360)``; saturation and value on the
8-bit scale ``[0, 255]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DomainError, InputError

RESIZE_METHOD = "bilinear"

# Tolerance for floor(W * mpp / fov); 395 px at 100/395 um/px must give one tile.
_FOV_EPS = 1e-9


@dataclass(frozen=True)
class Tile:
    image: np.ndarray
    microns_per_pixel: float
    slide_id: str = ""
    origin: tuple[int, int] = (0, 0)
    tile_id: str = ""
    source_size_px: int = 0

    def __post_init__(self):
        img = self.image
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
            raise DomainError(f"tile image must be non-empty HxWx3, got shape {img.shape}")
        if not self.microns_per_pixel > 0:
            raise DomainError(f"microns_per_pixel must be positive, got {self.microns_per_pixel}")

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def fov_um(self) -> float:
        return self.width * self.microns_per_pixel


def as_rgb(image) -> np.ndarray:
    if isinstance(image, Tile):
        image = image.image
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DomainError(f"expected an HxWx3 RGB array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DomainError("image is empty")
    return arr


def rgb_to_hsv(rgb) -> tuple[float, float, float]:
    """Hexcone HSV of one RGB triple (components may be real-valued).

    Returns ``(hue_deg, saturation, value)`` with S and V on [0, 255].
    Achromatic inputs get hue 0.
    """
    r, g, b = (float(c) for c in rgb)
    mx = max(r, g, b)
    mn = min(r, g, b)
    delta = mx - mn
    if delta == 0:
        return 0.0, 0.0, mx
    if mx == r:
        h = ((g - b) / delta) % 6.0
    elif mx == g:
        h = (b - r) / delta + 2.0
    else:
        h = (r - g) / delta + 4.0
    hue = (60.0 * h) % 360.0
    return hue, 255.0 * delta / mx, mx


def rgb_to_hsv_array(rgb) -> np.ndarray:
    """Vectorised :func:`rgb_to_hsv` over an ``(..., 3)`` array."""
    arr = np.asarray(rgb, dtype=np.float64)
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    mx = arr.max(axis=-1)
    mn = arr.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta == 0, 1.0, delta)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = np.where(delta == 0, 0.0, (60.0 * h) % 360.0)
    sat = np.where(mx == 0, 0.0, 255.0 * delta / np.where(mx == 0, 1.0, mx))
    return np.stack([hue, sat, mx], axis=-1)


def hsv_to_rgb(hue: float, sat: float, val: float) -> tuple[float, float, float]:
    """Inverse of :func:`rgb_to_hsv`; returns real-valued RGB on [0, 255]."""
    s = sat / 255.0
    c = val * s
    hp = (hue % 360.0) / 60.0
    x = c * (1 - abs(hp % 2 - 1))
    m = val - c
    sector = int(hp) % 6
    r, g, b = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    return r + m, g + m, b + m


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image.copy()
    pil = Image.fromarray(image).resize((size, size), resample=Image.BILINEAR)
    return np.asarray(pil, dtype=np.uint8)


def tile_grid_shape(width_px: int, height_px: int, microns_per_pixel: float, tile_fov: float):
    """Number of full tiles that fit as ``(rows, cols)``."""
    cols = math.floor(width_px * microns_per_pixel / tile_fov + _FOV_EPS)
    rows = math.floor(height_px * microns_per_pixel / tile_fov + _FOV_EPS)
    return rows, cols


def cut_tiles(raster, microns_per_pixel: float, tile_fov: float = 100.0,
              output_size: int = 512, slide_id: str = "") -> list[Tile]:
    """Cut a non-overlapping grid of ``tile_fov`` x ``tile_fov`` um tiles.

    Each source window is resized (bilinear) to ``output_size`` pixels; partial
    tiles at the right and bottom edges are dropped. Output is row-major by
    origin.
    """
    raster = as_rgb(raster)
    if not microns_per_pixel > 0 or not tile_fov > 0:
        raise DomainError("microns_per_pixel and tile_fov must be positive")
    window_f = tile_fov / microns_per_pixel
    if window_f < 1:
        raise DomainError(f"tile_fov {tile_fov} um is smaller than one source pixel")
    if output_size < 1:
        raise DomainError("output_size must be >= 1")
    height, width = raster.shape[:2]
    rows, cols = tile_grid_shape(width, height, microns_per_pixel, tile_fov)
    window = max(1, int(round(window_f)))
    tiles = []
    for row in range(rows):
        y0 = min(int(round(row * window_f)), height - window)
        for col in range(cols):
            x0 = min(int(round(col * window_f)), width - window)
            src = raster[y0:y0 + window, x0:x0 + window]
            out = resize_bilinear(np.ascontiguousarray(src), output_size)
            tiles.append(Tile(
                image=out,
                microns_per_pixel=tile_fov / output_size,
                slide_id=slide_id,
                origin=(x0, y0),
                tile_id=f"{slide_id}_x{x0}_y{y0}" if slide_id else f"x{x0}_y{y0}",
                source_size_px=window,
            ))
    return tiles


def grayscale(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64).sum(axis=-1) / 3.0


def empty_tile_reasons(image, mean_bounds=(10.0, 235.0), std_min: float = 5.0) -> list[str]:
    """Reasons a tile counts as empty; an empty list means it is kept."""
    img = as_rgb(image.image if isinstance(image, Tile) else image)
    low = np.broadcast_to(np.asarray(mean_bounds[0], dtype=np.float64), (3,))
    high = np.broadcast_to(np.asarray(mean_bounds[1], dtype=np.float64), (3,))
    if np.any(low > high) or std_min < 0:
        raise DomainError("mean bounds must satisfy low <= high and std_min >= 0")
    reasons = []
    if grayscale(img).std() < std_min:
        reasons.append("std<min")
    means = img.reshape(-1, 3).mean(axis=0)
    if np.any(means < low):
        reasons.append("mean<low")
    if np.any(means > high):
        reasons.append("mean>high")
    return reasons


def is_empty_tile(tile, mean_bounds=(10.0, 235.0), std_min: float = 5.0) -> bool:
    return bool(empty_tile_reasons(tile, mean_bounds, std_min))


def patch_mean(image, center, half_side: int) -> np.ndarray:
    """Per-channel mean over the square ``center +/- half_side``, clipped to the image."""
    img = as_rgb(image)
    if half_side < 0:
        raise DomainError("half_side must be >= 0")
    h, w = img.shape[:2]
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise DomainError(f"center ({x}, {y}) lies outside the {w}x{h} image")
    cx = min(int(round(x)), w - 1)
    cy = min(int(round(y)), h - 1)
    window = img[max(cy - half_side, 0):cy + half_side + 1,
                 max(cx - half_side, 0):cx + half_side + 1]
    return window.reshape(-1, 3).mean(axis=0, dtype=np.float64)


def default_half_side(nucleus_radius_px: float, fraction: float = 0.8) -> int:
    return int(math.floor(fraction * nucleus_radius_px))


def read_raster(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"raster not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise InputError(f"cannot decode raster {path}: {exc}") from exc


def write_png(image: np.ndarray, path) -> None:
    Image.fromarray(as_rgb(image).astype(np.uint8)).save(path, format="PNG")

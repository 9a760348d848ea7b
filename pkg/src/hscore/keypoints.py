"""Heatmap <-> keypoint conversion, keypoint fusion and heatmap Huber loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import COMPARTMENTS
from .errors import DomainError, InputError

HMF_MAGIC = b"HMF1"


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    cls: str
    confidence: float = 1.0
    label: str | None = None  # stain label, present on pathologist annotations


@dataclass
class Heatmap:
    """Per-class probability raster, ``values`` shaped ``(height, width, classes)``."""

    values: np.ndarray
    classes: tuple[str, ...] = COMPARTMENTS

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise DomainError(f"heatmap values must be HxWxC, got shape {v.shape}")
        if v.shape[2] != len(self.classes) or v.shape[2] < 1:
            raise DomainError(
                f"heatmap has {v.shape[2]} channels but {len(self.classes)} class names")
        if v.size and (not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1):
            raise DomainError("heatmap values must be finite and within [0, 1]")
        self.values = v
        self.classes = tuple(self.classes)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int, classes=COMPARTMENTS) -> "Heatmap":
        return cls(np.zeros((height, width, len(classes))), tuple(classes))


@dataclass(frozen=True)
class ExtractorParams:
    confidence_threshold: float = 0.5
    min_distance: float = 15.0
    pool_size: int = 3

    def __post_init__(self):
        if not 0 <= self.confidence_threshold <= 1:
            raise DomainError("confidence_threshold must lie in [0, 1]")
        if self.min_distance < 0:
            raise DomainError("min_distance must be >= 0")
        if self.pool_size < 1 or self.pool_size % 2 == 0:
            raise DomainError("pool_size must be a positive odd integer")


def _channel_peaks(channel: np.ndarray, params: ExtractorParams) -> list[tuple[float, int, int]]:
    """Local maxima of one channel as ``(value, y, x)`` before distance suppression."""
    pooled = ndimage.maximum_filter(channel, size=params.pool_size, mode="constant", cval=-np.inf)
    cand = (channel == pooled) & (channel >= params.confidence_threshold)
    if not cand.any():
        return []
    # Keep only the first pixel in (y, x) order of each connected equal-valued plateau.
    eight = np.ones((3, 3), dtype=bool)
    labels, _ = ndimage.label(cand, structure=eight)
    peaks = []
    for lab, box in enumerate(ndimage.find_objects(labels), 1):
        sub = labels[box] == lab
        vals = channel[box]
        y0, x0 = box[0].start, box[1].start
        if sub.sum() == 1:
            y, x = np.argwhere(sub)[0]
            peaks.append((float(vals[y, x]), y0 + int(y), x0 + int(x)))
            continue
        # pool_size 1 makes every pixel a candidate, so components can mix values
        for v in np.unique(vals[sub]):
            plateau, _ = ndimage.label(sub & (vals == v), structure=eight)
            ys, xs = np.nonzero(plateau)
            _, first = np.unique(plateau[ys, xs], return_index=True)
            peaks.extend((float(v), y0 + int(ys[i]), x0 + int(xs[i])) for i in first)
    return peaks


def _suppress(peaks, min_distance: float):
    peaks = sorted(peaks, key=lambda p: (-p[0], p[1], p[2]))
    accepted: list[tuple[float, int, int]] = []
    acc_xy = np.empty((0, 2))
    for value, y, x in peaks:
        if min_distance > 0 and len(accepted):
            d2 = (acc_xy[:, 0] - x) ** 2 + (acc_xy[:, 1] - y) ** 2
            if np.any(d2 <= min_distance * min_distance):
                continue
        accepted.append((value, y, x))
        acc_xy = np.vstack([acc_xy, [x, y]])
    return accepted


def extract_keypoints(heatmap: Heatmap, params: ExtractorParams | None = None) -> list[Keypoint]:
    """Keypoints at thresholded local maxima of every class channel.

    A pixel is a candidate when it equals the maximum of its ``pool_size``
    window and reaches ``confidence_threshold``. Candidates are accepted in
    descending value order (ties by ``(y, x)``); a candidate closer than or at
    ``min_distance`` to an accepted keypoint of the same class is dropped.
    """
    params = params or ExtractorParams()
    out = []
    for c, name in enumerate(heatmap.classes):
        peaks = _channel_peaks(heatmap.values[:, :, c], params)
        for value, y, x in _suppress(peaks, params.min_distance):
            out.append(Keypoint(float(x), float(y), name, value))
    return out


def render_heatmap(keypoints, width: int, height: int, sigma: float,
                   classes=COMPARTMENTS) -> Heatmap:
    """Gaussian training-target heatmap; channels take the pixel-wise max over keypoints."""
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    classes = tuple(classes)
    values = np.zeros((height, width, len(classes)))
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    denom = 2.0 * sigma * sigma
    for kp in keypoints:
        if kp.cls not in classes:
            raise DomainError(f"unknown class {kp.cls!r}")
        if not (0 <= kp.x < width and 0 <= kp.y < height):
            raise DomainError(f"keypoint ({kp.x}, {kp.y}) outside {width}x{height}")
        c = classes.index(kp.cls)
        gx = np.exp(-((xs - kp.x) ** 2) / denom)
        gy = np.exp(-((ys - kp.y) ** 2) / denom)
        bump = kp.confidence * np.outer(gy, gx)
        np.maximum(values[:, :, c], bump, out=values[:, :, c])
    return Heatmap(values, classes)


def fuse_keypoints(sets, model_weights=None, fuse_radius: float = 15.0) -> list[Keypoint]:
    """Weighted fusion of keypoint sets from several models, adapted from box fusion.

    Keypoints of one class are visited in descending confidence; each joins the
    first cluster whose fused centre lies within ``fuse_radius`` or opens a new
    one. Positions average with weight ``confidence * model_weight``; the fused
    confidence is the weight-averaged per-model maximum over the models present
    in the cluster.
    """
    sets = [list(s) for s in sets]
    if model_weights is None:
        model_weights = [1.0] * len(sets)
    weights = [float(w) for w in model_weights]
    if len(weights) != len(sets):
        raise DomainError(f"{len(sets)} keypoint sets but {len(weights)} weights")
    if any(not w > 0 for w in weights):
        raise DomainError("model weights must be positive")
    if fuse_radius < 0:
        raise DomainError("fuse_radius must be >= 0")

    entries = [(kp, m) for m, s in enumerate(sets) for kp in s]
    classes = sorted({kp.cls for kp, _ in entries})
    r2 = fuse_radius * fuse_radius
    fused = []
    for cls in classes:
        items = sorted((e for e in entries if e[0].cls == cls),
                       key=lambda e: (-e[0].confidence, e[1], e[0].y, e[0].x))
        clusters: list[dict] = []
        for kp, m in items:
            w = kp.confidence * weights[m]
            target = None
            for cl in clusters:
                cx, cy = cl["center"]
                if (kp.x - cx) ** 2 + (kp.y - cy) ** 2 <= r2:
                    target = cl
                    break
            if target is None:
                target = {"sx": 0.0, "sy": 0.0, "sw": 0.0, "best": {}, "center": (kp.x, kp.y),
                          "count": 0}
                clusters.append(target)
            target["sx"] += w * kp.x
            target["sy"] += w * kp.y
            target["sw"] += w
            target["count"] += 1
            target["best"][m] = max(target["best"].get(m, 0.0), kp.confidence)
            if target["sw"] > 0:
                target["center"] = (target["sx"] / target["sw"], target["sy"] / target["sw"])
        for cl in clusters:
            best = cl["best"]
            conf = sum(c * weights[m] for m, c in best.items()) / sum(weights[m] for m in best)
            x, y = cl["center"]
            fused.append(Keypoint(x, y, cls, conf))
    return sort_keypoints(fused)


def sort_keypoints(keypoints) -> list[Keypoint]:
    """Canonical order: class, descending confidence, then (y, x)."""
    return sorted(keypoints, key=lambda k: (k.cls, -k.confidence, k.y, k.x))


def huber_loss(predicted: Heatmap, target: Heatmap, delta: float = 1.0) -> float:
    """Mean Huber loss over all pixels and classes."""
    if not delta > 0:
        raise DomainError("delta must be positive")
    p = predicted.values if isinstance(predicted, Heatmap) else np.asarray(predicted, float)
    t = target.values if isinstance(target, Heatmap) else np.asarray(target, float)
    if p.shape != t.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        return 0.0
    r = np.abs(t - p)
    loss = np.where(r < delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(loss.mean())


def write_heatmap(heatmap: Heatmap, path) -> None:
    """HMF1: magic, then u32 height/width/classes (LE), then f32 values row-major, class-minor."""
    h, w, c = heatmap.values.shape
    with open(path, "wb") as fh:
        fh.write(HMF_MAGIC)
        fh.write(struct.pack("<3I", h, w, c))
        fh.write(heatmap.values.astype("<f4").tobytes(order="C"))


def read_heatmap(path, classes=None) -> Heatmap:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"heatmap not found: {path}")
    data = path.read_bytes()
    if data[:4] != HMF_MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}, expected {HMF_MAGIC!r}")
    if len(data) < 16:
        raise InputError(f"{path}: truncated header")
    h, w, c = struct.unpack("<3I", data[4:16])
    expected = 16 + 4 * h * w * c
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes for {h}x{w}x{c}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)
    if classes is None:
        classes = COMPARTMENTS[:c] if c <= len(COMPARTMENTS) else tuple(f"class{i}" for i in range(c))
    try:
        return Heatmap(values, tuple(classes))
    except DomainError as exc:
        raise InputError(f"{path}: {exc}") from exc

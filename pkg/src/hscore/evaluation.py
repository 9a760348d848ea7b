"""Keypoint detection metrics: radius matching, AP/mAP and paired bootstrap CIs."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import COMPARTMENTS, __version__
from .annotations import read_keypoints
from .errors import AlignmentError, DomainError

log = logging.getLogger(__name__)

AP_INTERPOLATION = "all-point"


@dataclass(frozen=True)
class EvalConfig:
    match_radius: float = 15.0
    classes: tuple[str, ...] = COMPARTMENTS
    batch_size: int = 8

    def __post_init__(self):
        if not self.match_radius > 0:
            raise DomainError("match_radius must be positive")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")


@dataclass(frozen=True)
class BootstrapConfig:
    resamples: int = 10_000
    confidence: float = 0.95
    outer_repeats: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.resamples < 1 or self.outer_repeats < 1:
            raise DomainError("resamples and outer_repeats must be >= 1")
        if not 0 < self.confidence < 1:
            raise DomainError("confidence must lie in (0, 1)")


@dataclass
class ClassMatch:
    """Confidence-ordered outcomes for one class."""

    confidences: list[float] = field(default_factory=list)
    tp: list[bool] = field(default_factory=list)
    gt_ids: list[int | None] = field(default_factory=list)
    n_gt: int = 0

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def n_fn(self) -> int:
        return self.n_gt - self.n_tp

    @classmethod
    def pooled(cls, parts) -> "ClassMatch":
        """Merge per-tile results into one confidence-ordered list.

        The sort is stable, so equal confidences keep tile order and each
        tile's internal order.
        """
        rows, n_gt = [], 0
        for part in parts:
            rows.extend(zip(part.confidences, part.tp, part.gt_ids))
            n_gt += part.n_gt
        rows.sort(key=lambda r: -r[0])
        return cls([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], n_gt)


MatchResult = dict  # class name -> ClassMatch


def match_keypoints(pred, gt, cfg: EvalConfig | None = None) -> MatchResult:
    """Greedy nearest-neighbour matching of one tile's predictions to ground truth.

    Per class, predictions are visited by descending confidence (ties by
    ``(y, x)``); each takes the nearest still-unmatched ground truth of its
    class within ``match_radius``, otherwise it is a false positive.
    ``gt_ids`` index into ``gt``.
    """
    cfg = cfg or EvalConfig()
    result: MatchResult = {}
    r2 = cfg.match_radius ** 2
    for cls in cfg.classes:
        gts = [(i, g) for i, g in enumerate(gt) if g.cls == cls]
        gxy = np.array([[g.x, g.y] for _, g in gts], dtype=np.float64).reshape(-1, 2)
        free = np.ones(len(gts), dtype=bool)
        preds = sorted((p for p in pred if p.cls == cls), key=lambda p: (-p.confidence, p.y, p.x))
        cm = ClassMatch(n_gt=len(gts))
        for p in preds:
            hit = None
            if free.any():
                d2 = (gxy[:, 0] - p.x) ** 2 + (gxy[:, 1] - p.y) ** 2
                d2[~free] = np.inf
                k = int(np.argmin(d2))
                if d2[k] <= r2:
                    hit = k
            cm.confidences.append(float(p.confidence))
            cm.tp.append(hit is not None)
            cm.gt_ids.append(gts[hit][0] if hit is not None else None)
            if hit is not None:
                free[hit] = False
        result[cls] = cm
    return result


def average_precision(match: ClassMatch) -> float | None:
    """All-point interpolated AP; ``None`` when the class has no ground truth."""
    if match.n_gt == 0:
        return None
    if not match.tp:
        return 0.0
    hits = np.asarray(match.tp, dtype=bool)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall only moves on true positives, each by 1 / n_gt
    return float(np.sum(envelope[hits]) / match.n_gt)


def mean_ap(per_class: dict) -> float:
    """Unweighted mean over classes with a defined AP."""
    defined = {k: v for k, v in per_class.items() if v is not None}
    for k in per_class:
        if per_class[k] is None:
            log.warning("class %s has no ground truth; excluded from mAP", k)
    if not defined:
        raise DomainError("no class has any ground truth; mAP is undefined")
    return float(sum(defined[k] for k in sorted(defined)) / len(defined))


def _anchored_mean(a: np.ndarray) -> float:
    """Mean taken relative to the first element, exact for constant input."""
    return float(a[0] + (a - a[0]).mean())


def bootstrap_ci(diffs, cfg: BootstrapConfig | None = None) -> tuple[float, float, float]:
    """Percentile bootstrap CI of the mean, averaged over repeated bootstraps.

    Each outer repeat draws ``resamples`` resamples with replacement and takes
    the ``(1-c)/2`` and ``1-(1-c)/2`` percentiles of the resample means; the
    bounds are then averaged over ``outer_repeats`` independently seeded
    repeats. Returns ``(lower, upper, observed_mean)``.
    """
    cfg = cfg or BootstrapConfig()
    x = np.asarray(diffs, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("bootstrap needs at least one value")
    n = x.size
    alpha = (1.0 - cfg.confidence) / 2.0
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.outer_repeats)
    lowers = np.empty(cfg.outer_repeats)
    uppers = np.empty(cfg.outer_repeats)
    chunk = max(1, 2_000_000 // n)
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        means = np.empty(cfg.resamples)
        for start in range(0, cfg.resamples, chunk):
            stop = min(start + chunk, cfg.resamples)
            idx = rng.integers(0, n, size=(stop - start, n))
            means[start:stop] = x[0] + (x[idx] - x[0]).mean(axis=1)
        lowers[k], uppers[k] = np.percentile(means, [alpha * 100.0, (1.0 - alpha) * 100.0])
    return _anchored_mean(lowers), _anchored_mean(uppers), _anchored_mean(x)


def format_ci_table(rows: dict, title: str = "Confidence interval for mean difference") -> str:
    """Metric rows with lower/upper bound columns."""
    width = max([len("metric")] + [len(k) for k in rows])
    lines = [title, f"{'metric':<{width}}  {'Lower bound':>12}  {'Upper bound':>12}"]
    for name, (lo, hi, *_rest) in rows.items():
        lines.append(f"{name:<{width}}  {lo:>12.5f}  {hi:>12.5f}")
    return "\n".join(lines) + "\n"


def _tile_matches(pred_by_tile, gt_by_tile, keys, cfg):
    return {k: match_keypoints(pred_by_tile.get(k, []), gt_by_tile.get(k, []), cfg) for k in keys}


def _pooled_ap(matches, keys, cfg) -> dict:
    per_class = {}
    for cls in cfg.classes:
        per_class[cls] = average_precision(ClassMatch.pooled(matches[k][cls] for k in keys))
    return per_class


def _check_alignment(pred, gt, label: str):
    extra = sorted(set(pred) - set(gt))
    if extra:
        names = ", ".join(f"{s}/{t}" for s, t in extra[:20])
        raise AlignmentError(f"{label}: {len(extra)} tile(s) absent from ground truth: {names}",
                             extra)


def evaluate_grouped(pred, gt, cfg: EvalConfig | None = None, baseline=None,
                     boot: BootstrapConfig | None = None, threads: int = 1) -> dict:
    """Evaluate grouped keypoints ``{(slide, tile): [Keypoint]}``.

    Tiles are sorted by ``(slide_id, tile_id)`` and chunked into batches of
    ``batch_size``; AP and mAP are reported pooled over all tiles and per
    batch. With ``baseline`` the per-batch differences ``pred - baseline``
    get bootstrap confidence intervals.
    """
    cfg = cfg or EvalConfig()
    _check_alignment(pred, gt, "predictions")
    if baseline is not None:
        _check_alignment(baseline, gt, "baseline")
    keys = sorted(gt)
    batches = [keys[i:i + cfg.batch_size] for i in range(0, len(keys), cfg.batch_size)]

    def run(p):
        matches = _tile_matches(p, gt, keys, cfg)
        pooled = _pooled_ap(matches, keys, cfg)
        series = []
        for b in batches:
            per = _pooled_ap(matches, b, cfg)
            defined = [v for v in per.values() if v is not None]
            series.append({"tiles": len(b), "ap": per,
                           "map": float(sum(defined) / len(defined)) if defined else None})
        return pooled, series

    if threads > 1 and baseline is not None:
        with ThreadPoolExecutor(max_workers=2) as pool:
            (pooled, series), (b_pooled, b_series) = pool.map(run, [pred, baseline])
    else:
        pooled, series = run(pred)
        if baseline is not None:
            b_pooled, b_series = run(baseline)

    report = {
        "tool": "hscore",
        "version": __version__,
        "ap": pooled,
        "map": mean_ap(pooled),
        "interpolation": AP_INTERPOLATION,
        "matching": "greedy nearest neighbour, euclidean distance",
        "batches": series,
        "config": asdict(cfg),
    }
    if baseline is not None:
        boot = boot or BootstrapConfig()
        report["baseline_ap"] = b_pooled
        report["baseline_map"] = mean_ap(b_pooled)
        ci = {}
        metrics = [(f"{c} AP", lambda s, c=c: s["ap"][c]) for c in cfg.classes]
        metrics.append(("mAP", lambda s: s["map"]))
        for name, get in metrics:
            diffs = [get(a) - get(b) for a, b in zip(series, b_series)
                     if get(a) is not None and get(b) is not None]
            if not diffs:
                log.warning("no batch defines %s; skipping its interval", name)
                continue
            lo, hi, mean = bootstrap_ci(diffs, boot)
            ci[name] = {"lower": lo, "upper": hi, "mean": mean, "n_batches": len(diffs)}
        report["ci"] = ci
        report["ci_table"] = format_ci_table({k: (v["lower"], v["upper"]) for k, v in ci.items()})
        report["bootstrap"] = asdict(boot)
    return report


def evaluate(pred_file, gt_file, cfg: EvalConfig | None = None, baseline_file=None,
             boot: BootstrapConfig | None = None, threads: int = 1) -> dict:
    pred = read_keypoints(pred_file)
    gt = read_keypoints(gt_file)
    baseline = read_keypoints(baseline_file) if baseline_file is not None else None
    return evaluate_grouped(pred, gt, cfg, baseline, boot, threads)


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"

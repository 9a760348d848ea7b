"""``hscore`` command line.

Exit codes: 0 success, 2 input error (missing/malformed files or flags),
3 constraint violation (arguments outside an operation's domain).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import COMPARTMENTS, __version__
from .annotations import read_keypoints, write_keypoints
from .calibration import (CalibrationItem, CalibrationSet, GridSpec, calibrate_full,
                          format_profile, leave_one_slide_out, load_profile)
from .config import PipelineConfig
from .errors import DomainError, HScoreError, InputError
from .evaluation import BootstrapConfig, EvalConfig, evaluate, report_to_json
from .imaging import (Tile, cut_tiles, empty_tile_reasons, patch_mean, read_raster, rgb_to_hsv,
                      write_png)
from .keypoints import (ExtractorParams, extract_keypoints, fuse_keypoints, read_heatmap,
                        render_heatmap, sort_keypoints, write_heatmap)
from .staining import ClassCounts, HScoreReport, estimate_hue_split, score_tiles
from . import synthgen

log = logging.getLogger("hscore")

MANIFEST_COLUMNS = ("tile_id", "slide_id", "x", "y", "source_px", "microns_per_pixel",
                    "status", "reason", "path")


def _comments(cfg: PipelineConfig, command: str, extra=()) -> list[str]:
    return [f"command={command}", *cfg.echo(), *extra]


def _out_path(args, default: str) -> Path:
    return Path(args.out) if args.out else Path(default)


# --- tile / split -----------------------------------------------------------

def cmd_tile(args, cfg):
    raster = read_raster(args.raster)
    mpp = args.mpp if args.mpp is not None else read_mpp_sidecar(args.raster)
    slide_id = args.slide_id or Path(args.raster).stem
    out = _out_path(args, "tiles")
    out.mkdir(parents=True, exist_ok=True)
    tiles = cut_tiles(raster, mpp, cfg["tile.fov_um"], cfg["tile.output_px"], slide_id)
    bounds = (cfg["tile.mean_low"], cfg["tile.mean_high"])

    def work(tile):
        reasons = empty_tile_reasons(tile, bounds, cfg["tile.std_min"])
        path = out / f"{tile.tile_id}.png"
        if not reasons:
            write_png(tile.image, path)
        return tile, reasons, path

    rows = _map(work, tiles, cfg["threads"])
    lines = [f"# {c}" for c in _comments(cfg, "tile", [f"raster={args.raster}", f"mpp={mpp}"])]
    lines.append("# " + "\t".join(MANIFEST_COLUMNS))
    for tile, reasons, path in rows:
        status = "filtered" if reasons else "kept"
        lines.append("\t".join([tile.tile_id, tile.slide_id, str(tile.origin[0]),
                                str(tile.origin[1]), str(tile.source_size_px), repr(mpp), status,
                                ";".join(reasons), path.name if not reasons else ""]))
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    kept = sum(1 for _, r, _ in rows if not r)
    print(f"{len(rows)} tiles, {kept} kept, {len(rows) - kept} filtered -> {out}")


def read_mpp_sidecar(raster) -> float:
    """``<raster>.mpp`` holding a ``microns_per_pixel=<value>`` line."""
    path = Path(str(raster) + ".mpp")
    if not path.is_file():
        raise InputError(f"no --mpp given and no calibration sidecar {path}")
    for line in path.read_text(encoding="utf-8").splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "microns_per_pixel":
            try:
                return float(value)
            except ValueError:
                raise InputError(f"{path}: microns_per_pixel is not a number") from None
    raise InputError(f"{path}: missing field 'microns_per_pixel'")


def read_manifest(path) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != len(MANIFEST_COLUMNS):
            raise InputError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
        rows.append(fields)
    return rows


def split_sizes(n: int, ratios) -> tuple[int, int, int]:
    """Train/val/test sizes; val and test round down, train takes the remainder."""
    total = sum(ratios)
    val = n * ratios[1] // total
    test = n * ratios[2] // total
    return n - val - test, val, test


def cmd_split(args, cfg):
    rows = [r for r in read_manifest(args.manifest) if r[6] == "kept"]
    if not rows:
        raise DomainError(f"manifest {args.manifest} lists no kept tiles")
    ratios = cfg.split_ratios()
    order = np.random.default_rng(cfg["seed"]).permutation(len(rows))
    n_train, n_val, _ = split_sizes(len(rows), ratios)
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    out = _out_path(args, "split")
    out.mkdir(parents=True, exist_ok=True)
    for name, idx in parts.items():
        lines = [f"# {c}" for c in _comments(cfg, "split", [f"part={name}"])]
        lines.append("# " + "\t".join(MANIFEST_COLUMNS))
        lines += ["\t".join(rows[i]) for i in sorted(idx)]
        (out / f"{name}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))


# --- heatmaps ----------------------------------------------------------------

def _extractor(cfg) -> ExtractorParams:
    return ExtractorParams(cfg["extractor.threshold"], cfg["extractor.min_distance"],
                           cfg["extractor.pool_size"])


def heatmap_key(path: Path, default_slide: str) -> tuple[str, str]:
    """``<slide>__<tile>.hmf`` names carry the slide id; bare names use ``default_slide``."""
    slide, sep, tile = path.stem.partition("__")
    return (slide, tile) if sep else (default_slide, path.stem)


def cmd_extract(args, cfg):
    params = _extractor(cfg)
    paths = [Path(p) for p in args.heatmaps]
    for p in paths:
        if not p.is_file():
            raise InputError(f"heatmap not found: {p}")
    results = _map(lambda p: extract_keypoints(read_heatmap(p), params), paths, cfg["threads"])
    grouped = {heatmap_key(p, args.slide_id): sort_keypoints(kps) for p, kps in zip(paths, results)}
    out = _out_path(args, "keypoints.tsv")
    write_keypoints(out, grouped, _comments(cfg, "extract"))
    print(f"{sum(len(v) for v in grouped.values())} keypoints from {len(paths)} heatmaps -> {out}")


def cmd_fuse(args, cfg):
    sets = [read_keypoints(p) for p in args.tsv]
    weights = args.weights or [1.0] * len(sets)
    if len(weights) != len(sets):
        raise DomainError(f"{len(sets)} keypoint files but {len(weights)} weights")
    keys = sorted(set().union(*sets))
    grouped = {k: fuse_keypoints([s.get(k, []) for s in sets], weights, cfg["fuse.radius"])
               for k in keys}
    out = _out_path(args, "fused.tsv")
    write_keypoints(out, grouped, _comments(cfg, "fuse", [f"weights={weights}"]))
    print(f"fused {len(sets)} files over {len(keys)} tiles -> {out}")


def cmd_render(args, cfg):
    grouped = read_keypoints(args.tsv)
    size = cfg["tile.output_px"]
    width = args.width or size
    height = args.height or size
    sigma = cfg["render.sigma"]
    out = _out_path(args, "heatmaps")
    out.mkdir(parents=True, exist_ok=True)
    for (slide, tile), kps in sorted(grouped.items()):
        write_heatmap(render_heatmap(kps, width, height, sigma), out / f"{slide}__{tile}.hmf")
    (out / "render.txt").write_text(
        "\n".join(_comments(cfg, "render", [f"width={width}", f"height={height}"])) + "\n",
        encoding="utf-8")
    print(f"{len(grouped)} heatmaps -> {out}")


# --- scoring -----------------------------------------------------------------

def _load_tile(tiles_dir: Path, slide: str, tile_id: str, cfg) -> Tile:
    path = tiles_dir / f"{tile_id}.png"
    img = read_raster(path)
    return Tile(img, cfg["tile.fov_um"] / img.shape[1], slide, (0, 0), tile_id)


def _profile(args, cfg):
    path = args.profile or cfg["stain.profile"]
    if not path:
        raise InputError("no stain profile given (--profile or stain.profile)")
    return load_profile(path), path


def hscore_table(per_slide: dict[str, dict]) -> str:
    lines = ["slide\t" + "\t".join(COMPARTMENTS)]
    for slide, h in per_slide.items():
        cells = ["" if h.get(c) is None else f"{h[c]:.2f}" for c in COMPARTMENTS]
        lines.append(slide + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_score(args, cfg):
    profile, profile_path = _profile(args, cfg)
    grouped = read_keypoints(args.keypoints)
    tiles_dir = Path(args.tiles)
    if not tiles_dir.is_dir():
        raise InputError(f"tile directory not found: {tiles_dir}")
    keys = sorted(grouped)

    def work(key):
        slide, tile_id = key
        tile = _load_tile(tiles_dir, slide, tile_id, cfg)
        return score_tiles([(tile, grouped[key])], profile).counts

    partials = _map(work, keys, cfg["threads"])
    per_slide: dict[str, ClassCounts] = {}
    pooled = ClassCounts()
    for (slide, _), counts in zip(keys, partials):
        per_slide[slide] = per_slide.get(slide, ClassCounts()).merge(counts)
        pooled = pooled.merge(counts)
    params = {"config": cfg.as_dict(), "profile_path": str(profile_path),
              "profile": format_profile(profile).splitlines()}
    slides = [HScoreReport(c, {"slide_id": s, "profile": profile.annotator_id}).to_dict()
              for s, c in per_slide.items()]
    for s in slides:
        del s["params"]
    report = {
        "tool": "hscore",
        "version": __version__,
        "pooled": HScoreReport(pooled, {"slides": sorted(per_slide), "tiles": len(keys),
                                        "profile": profile.annotator_id}, params).to_dict(),
        "slides": slides,
        "table": hscore_table({s: HScoreReport(c).hscores for s, c in per_slide.items()}),
    }
    text = json.dumps(report, indent=2) + "\n"
    out = _out_path(args, "hscore_report.json")
    out.write_text(text, encoding="utf-8")
    print(report["table"], end="")


# --- calibration ------------------------------------------------------------

def _calibration_set(args, cfg) -> CalibrationSet:
    ref = read_keypoints(args.annotations, require_labels=True)
    pred = read_keypoints(args.predictions) if args.predictions else ref
    tiles_dir = Path(args.tiles)
    if not tiles_dir.is_dir():
        raise InputError(f"tile directory not found: {tiles_dir}")
    items = []
    for key in sorted(set(ref) | set(pred)):
        slide, tile_id = key
        items.append(CalibrationItem(_load_tile(tiles_dir, slide, tile_id, cfg),
                                     ref.get(key, []), pred.get(key, [])))
    return CalibrationSet(items, args.annotator)


def _annotated_hue_split(cal: CalibrationSet, half_side: int) -> float:
    blue, brown = [], []
    for item in cal.items:
        for kp in item.reference:
            hue = rgb_to_hsv(patch_mean(item.tile.image, (kp.x, kp.y), half_side))[0]
            (blue if kp.label == "none" else brown).append(hue)
    return estimate_hue_split(blue, brown)


def cmd_calibrate(args, cfg):
    cal = _calibration_set(args, cfg)
    grid = GridSpec(cfg["calibrate.grid_lo"], cfg["calibrate.grid_hi"], cfg["calibrate.grid_step"])
    half = cfg.half_side()
    hue = _annotated_hue_split(cal, half) if args.estimate_hue_split else cfg["calibrate.hue_split"]
    result = calibrate_full(cal, grid, hue, half)
    out = _out_path(args, f"{args.annotator}.profile")
    text = format_profile(result.profile)
    text += "".join(f"# {c}\n" for c in _comments(cfg, "calibrate", [f"hue_split_used={hue}"]))
    out.write_bytes(text.encode("utf-8"))
    print(f"{args.annotator}: left={result.profile.value_left:g} right="
          f"{result.profile.value_right:g} objective={result.objective:.4f} -> {out}")
    if args.loso:
        table = leave_one_slide_out(cal, grid, hue, half)
        lines = [f"# {c}" for c in _comments(cfg, "calibrate --loso")]
        lines.append("annotator\tslide\tleft\tright\tobjective")
        for slide, p in table.items():
            lines.append(f"{args.annotator}\t{slide}\t{p.value_left:g}\t{p.value_right:g}\t"
                         f"{p.objective:.6f}")
        loso = out.with_name(out.name + ".loso.tsv")
        loso.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print("\n".join(lines[-len(table) - 1:]))


# --- evaluation -------------------------------------------------------------

def cmd_eval(args, cfg):
    ecfg = EvalConfig(cfg["eval.match_radius"], COMPARTMENTS, cfg["eval.batch_size"])
    boot = BootstrapConfig(cfg["bootstrap.resamples"], cfg["bootstrap.confidence"],
                           cfg["bootstrap.outer_repeats"], cfg["seed"])
    report = evaluate(args.pred, args.gt, ecfg, args.baseline, boot, cfg["threads"])
    report["resolved_config"] = cfg.as_dict()
    out = _out_path(args, "eval_report.json")
    out.write_text(report_to_json(report), encoding="utf-8")
    print("AP " + " ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}"
                           for k, v in report["ap"].items()) + f" mAP={report['map']:.4f}")
    if "ci_table" in report:
        print(report["ci_table"], end="")


# --- synthetic bundle -------------------------------------------------------

def cmd_synth(args, cfg):
    radius = int(round(cfg["nucleus_radius_px"]))
    mix = tuple(float(v) for v in args.class_mix.split(","))
    if len(mix) != 4:
        raise InputError("--class-mix needs four comma-separated fractions")
    spec = synthgen.SynthSpec(size=cfg["tile.output_px"], n_nuclei=args.nuclei, class_mix=mix,
                              nucleus_radius=radius, seed=cfg["seed"])
    out = _out_path(args, "synth")
    tiles_dir = out / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    seeds = synthgen.tile_seeds(cfg["seed"], args.slides)
    slides = _map(lambda i: synthgen.generate_slide(replace(spec, seed=seeds[i]),
                                                    args.tiles_per_slide, f"slide{i + 1:03d}"),
                  range(args.slides), cfg["threads"])
    grouped = {}
    expected = [f"# {c}" for c in _comments(cfg, "synth", [f"class_mix={args.class_mix}",
                                                            f"nuclei={args.nuclei}"])]
    all_tiles = []
    for tiles in slides:
        for st in tiles:
            write_png(st.tile.image, tiles_dir / f"{st.tile.tile_id}.png")
            grouped[(st.tile.slide_id, st.tile.tile_id)] = st.keypoints
            all_tiles.append(st)
        counts, h = synthgen.pooled_expectation(tiles)
        sid = tiles[0].tile.slide_id if tiles else ""
        for comp in COMPARTMENTS:
            expected.append(f"slide.{sid}.{comp}.counts={','.join(map(str, counts.counts[comp]))}")
            expected.append(f"slide.{sid}.{comp}.hscore={'' if h[comp] is None else repr(h[comp])}")
    counts, h = synthgen.pooled_expectation(all_tiles)
    for comp in COMPARTMENTS:
        expected.append(f"pooled.{comp}.counts={','.join(map(str, counts.counts[comp]))}")
        expected.append(f"pooled.{comp}.hscore={'' if h[comp] is None else repr(h[comp])}")
    write_keypoints(out / "keypoints.tsv", grouped, _comments(cfg, "synth"))
    (out / "expected.txt").write_text("\n".join(expected) + "\n", encoding="utf-8")
    (out / "reference.profile").write_text(format_profile(spec.profile), encoding="utf-8")
    print(f"{len(all_tiles)} tiles over {args.slides} slides -> {out}")


# --- plumbing ---------------------------------------------------------------

def _map(fn, items, threads: int):
    items = list(items)
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value config file")
    shared.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    shared.add_argument("--seed", type=int, help="master seed")
    shared.add_argument("--threads", type=int, help="worker threads")
    shared.add_argument("--out", help="output file or directory")

    parser = argparse.ArgumentParser(prog="hscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hscore {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", parents=[shared], help="cut a raster into fixed-FOV tiles")
    p.add_argument("raster")
    p.add_argument("--mpp", type=float, help="microns per pixel of the raster")
    p.add_argument("--slide-id")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("split", parents=[shared], help="train/val/test split of a tile manifest")
    p.add_argument("manifest")
    p.add_argument("--ratios", help="e.g. 3:1:1 (overrides split.ratios)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("extract", parents=[shared], help="heatmaps (HMF1) to keypoint TSV")
    p.add_argument("heatmaps", nargs="+")
    p.add_argument("--slide-id", default="slide")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("fuse", parents=[shared], help="fuse keypoint TSVs from several models")
    p.add_argument("tsv", nargs="+")
    p.add_argument("--weights", type=float, nargs="+")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("render", parents=[shared], help="keypoint TSV to Gaussian heatmaps")
    p.add_argument("tsv")
    p.add_argument("--sigma", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("score", parents=[shared], help="H-score report for tiles + keypoints")
    p.add_argument("--tiles", required=True, help="directory of <tile_id>.png")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--profile")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate", parents=[shared], help="fit annotator Value thresholds")
    p.add_argument("--tiles", required=True)
    p.add_argument("--annotations", required=True, help="annotator TSV with stain labels")
    p.add_argument("--predictions", help="model TSV (defaults to the annotation keypoints)")
    p.add_argument("--annotator", default="annotator")
    p.add_argument("--estimate-hue-split", action="store_true",
                   help="derive the hue split from the labelled nuclei")
    p.add_argument("--loso", action="store_true", help="also run leave-one-slide-out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", parents=[shared], help="keypoint AP/mAP with optional paired CI")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--baseline", help="second prediction file; CIs are for pred - baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic oracle bundle")
    p.add_argument("--slides", type=int, default=2)
    p.add_argument("--tiles-per-slide", type=int, default=5)
    p.add_argument("--nuclei", type=int, default=50)
    p.add_argument("--class-mix", default="0.1,0.2,0.3,0.4")
    p.set_defaults(func=cmd_synth)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip(), "--set")
    if args.seed is not None:
        cfg.set("seed", args.seed, "--seed")
    if args.threads is not None:
        cfg.set("threads", args.threads, "--threads")
    if getattr(args, "sigma", None) is not None:
        cfg.set("render.sigma", args.sigma, "--sigma")
    if getattr(args, "ratios", None):
        cfg.set("split.ratios", args.ratios, "--ratios")
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.func(args, cfg)
    except InputError as exc:
        print(f"hscore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"hscore {args.command}: constraint violation: {exc}", file=sys.stderr)
        return 3
    except HScoreError as exc:
        print(f"hscore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

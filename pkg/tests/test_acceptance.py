"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from hscore import synthgen
from hscore.calibration import (GridSpec, calibrate, calibrate_full, format_profile,
                                leave_one_slide_out)
from hscore.cli import hscore_table, main
from hscore.evaluation import BootstrapConfig, EvalConfig, average_precision, \
    bootstrap_ci, format_ci_table, match_keypoints
from hscore.imaging import cut_tiles, is_empty_tile, write_png
from hscore.annotations import write_keypoints
from hscore.keypoints import ExtractorParams, Keypoint, extract_keypoints, huber_loss, \
    render_heatmap
from hscore.staining import hscore_from_row, score_tiles

from oracles import bootstrap_reference, greedy_match, pr_rectangle_ap


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance {number}] {'PASS' if ok else 'FAIL'}: {title}"
                  + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return emit


def _random_points(rng, n, size, sep):
    pts = []
    while len(pts) < n:
        p = rng.uniform(0, size - 1, 2)
        if all(np.hypot(*(p - q)) > sep for q in pts):
            pts.append(p)
    return pts


def test_1_roundtrip_detection(report):
    sigma, params = 4.0, ExtractorParams(0.5, 15.0)
    sep = max(4 * sigma, params.min_distance) + 1.0
    rng = np.random.default_rng(1)
    size = 256
    failures, total = 0, 0
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(5, 81))
        kps = [Keypoint(float(x), float(y), ("stroma", "epithelium")[int(rng.integers(2))])
               for x, y in _random_points(rng, n, size, sep)]
        found = extract_keypoints(render_heatmap(kps, size, size, sigma), params)
        total += n
        ok = len(found) == n
        for kp in kps:
            ok &= any(f.cls == kp.cls and np.hypot(f.x - kp.x, f.y - kp.y) <= 1.0 for f in found)
        failures += not ok
    elapsed = time.perf_counter() - start
    report(1, "render -> extract roundtrip", failures == 0 and elapsed < 30,
           f"{200 - failures}/200 sets exact, {total} points, {elapsed:.1f}s")


def test_2_ap_oracle_equivalence(report):
    rng = np.random.default_rng(2)
    cfg = EvalConfig(match_radius=6.0)
    worst, cases = 0.0, 0
    for _ in range(1000):
        pred, gt = [], []
        for cls in cfg.classes:
            for _ in range(int(rng.integers(0, 7))):
                # coarse confidences so ties occur
                pred.append(Keypoint(float(rng.integers(0, 20)), float(rng.integers(0, 20)), cls,
                                     float(rng.integers(1, 5)) / 4))
            for _ in range(int(rng.integers(0, 5))):
                gt.append(Keypoint(float(rng.integers(0, 20)), float(rng.integers(0, 20)), cls))
        matches = match_keypoints(pred, gt, cfg)
        for cls in cfg.classes:
            p = [(k.x, k.y, k.confidence) for k in pred if k.cls == cls]
            g = [(k.x, k.y) for k in gt if k.cls == cls]
            ref = pr_rectangle_ap([j is not None for _, j in greedy_match(p, g, 6.0)], len(g))
            got = average_precision(matches[cls])
            if ref is None or got is None:
                assert ref is None and got is None
                continue
            worst = max(worst, abs(got - ref))
            cases += 1
    report(2, "AP equals PR-rectangle oracle", worst <= 1e-12,
           f"1000 cases, {cases} class curves, max |diff| {worst:.1e}")


def test_3_huber_branches(report):
    zeros = np.zeros((8, 8, 2))
    small = huber_loss(zeros, zeros + 0.5, 1.0)
    large = huber_loss(zeros, zeros + 2.0, 1.0)
    # both branches must meet delta^2/2 at |r| = delta; at delta -+ 1e-9 the loss can
    # move by at most delta * 1e-9 (its slope there), anything more is a jump
    excess = 0.0
    for delta in (0.25, 1.0, 3.0):
        for r in (delta - 1e-9, delta, delta + 1e-9, -(delta + 1e-9)):
            moved = abs(huber_loss(zeros, zeros + r, delta) - 0.5 * delta * delta)
            excess = max(excess, moved - delta * abs(abs(r) - delta))
    gap = excess
    ok = small == 0.125 and large == 1.5 and gap <= 1e-9
    report(3, "Huber loss branch check", ok, f"0.5->{small}, 2->{large}, jump at |r|=delta {gap:.1e}")


def test_4_hscore_formula(report):
    exact = [hscore_from_row(r) for r in ((0, 0, 0, 100), (50, 50, 0, 0), (25, 25, 25, 25))]
    rng = np.random.default_rng(4)
    rows = rng.integers(0, 1000, size=(10_000, 4))
    rows[rows.sum(axis=1) == 0, 0] = 1
    in_range = all(0.0 <= hscore_from_row(r) <= 300.0 for r in rows.tolist())
    mono = 0
    for _ in range(1000):
        row = rng.integers(0, 50, size=4)
        k = int(rng.integers(0, 3))
        row[k] += 1  # something to upgrade
        up = row.copy()
        up[k] -= 1
        up[k + 1] += 1
        diff = hscore_from_row(up) - hscore_from_row(row)
        mono += diff > 0 and abs(diff - 100.0 / row.sum()) <= 1e-9
    ok = exact == [300.0, 50.0, 150.0] and in_range and mono == 1000
    report(4, "H-score formula", ok, f"mixes {exact}, 10000 in range={in_range}, "
                                     f"monotone {mono}/1000")


def test_5_plant_and_recover(report):
    rng = np.random.default_rng(5)
    grid = GridSpec(40, 160, 5)
    half = synthgen.reference_half_side(15)
    values = grid.values().tolist()
    start = time.perf_counter()
    recovered = 0
    for case in range(50):
        while True:
            left, right = sorted(rng.choice(values, 2, replace=False).tolist())
            if right - left >= 10:
                break
        cal = synthgen.calibration_set(left, right, slides=4, tiles_per_slide=2, nuclei=30,
                                       seed=case)
        prof = calibrate(cal, grid, 125.0, half)
        recovered += (prof.value_left, prof.value_right) == (left, right)
    cal = synthgen.calibration_set(80, 120, slides=4, tiles_per_slide=2, nuclei=30, seed=99)
    table = leave_one_slide_out(cal, grid, 125.0, half)
    shape_ok = list(table) == cal.slides() and len(table) == 4
    for held, prof in table.items():
        train = cal.subset([s for s in cal.slides() if s != held])
        shape_ok &= len(train.slides()) == 3
        shape_ok &= prof == calibrate_full(train, grid, 125.0, half).profile
    elapsed = time.perf_counter() - start
    report(5, "plant-and-recover calibration + leave-one-slide-out",
           recovered == 50 and shape_ok and elapsed < 120,
           f"{recovered}/50 recovered, loso folds={len(table)}, {elapsed:.1f}s")


def test_6_bootstrap(report):
    start = time.perf_counter()
    const = bootstrap_ci([0.42] * 13, BootstrapConfig(1000, 0.95, 20, 6))
    # dyadic data, power-of-two length, percentile positions on integers and four
    # outer repeats keep every operation exact, so the shift must be exact too
    base = np.random.default_rng(6).integers(-64, 64, size=16) / 1024.0
    cfg = BootstrapConfig(1001, 0.95, 4, 6)
    lo, hi, _ = bootstrap_ci(base, cfg)
    lo2, hi2, _ = bootstrap_ci(base + 0.5, cfg)
    shift_exact = (lo2 - lo, hi2 - hi) == (0.5, 0.5)
    worst = 0.0
    for s in range(20):
        x = np.random.default_rng(600 + s).normal(0.03, 0.05, size=50)
        cfg = BootstrapConfig(1000, 0.95, 100, s)
        worst = max(worst, float(np.max(np.abs(np.subtract(bootstrap_ci(x, cfg),
                                                           bootstrap_reference(x, 1000, 0.95,
                                                                               100, s))))))
    table = format_ci_table({"Stroma AP": (-0.01234, 0.0456), "Epithelium AP": (0.00461, 0.0701),
                             "mAP": (0.001, 0.05)}).splitlines()
    layout = (table[1].split() == ["metric", "Lower", "bound", "Upper", "bound"]
              and table[3].split()[-2:] == ["0.00461", "0.07010"])
    elapsed = time.perf_counter() - start
    ok = const == (0.42, 0.42, 0.42) and shift_exact and worst <= 1e-12 and layout and elapsed < 60
    report(6, "paired bootstrap CI", ok, f"constant={const[:2]}, shift exact={shift_exact}, "
                                         f"max |diff| {worst:.1e} over 20, {elapsed:.1f}s")


def test_7_end_to_end(report):
    rng = np.random.default_rng(7)
    params = ExtractorParams(0.5, 15.0)
    mismatches, rows = 0, {}
    for s in range(20):
        mix = tuple(rng.dirichlet(np.ones(4)))
        spec = synthgen.SynthSpec(n_nuclei=40, class_mix=mix, seed=int(rng.integers(2 ** 32)))
        sid = f"slide{s + 1:02d}"
        planted = synthgen.generate_slide(spec, 5, sid)
        raster, by_origin = synthgen.stitch(planted, cols=5)
        tiles = cut_tiles(raster, 100.0 / spec.size, 100.0, spec.size, sid)
        items = []
        for tile in tiles:
            assert not is_empty_tile(tile)
            gt = by_origin[tile.origin].keypoints
            heat = render_heatmap(gt, tile.width, tile.height, 4.0)
            items.append((tile, extract_keypoints(heat, params)))
        got = score_tiles(items, spec.profile).hscores
        _, expected = synthgen.pooled_expectation(planted)
        mismatches += got != expected
        rows[sid] = got
    table = hscore_table(rows)
    report(7, "end-to-end synthetic oracle", mismatches == 0,
           f"{20 - mismatches}/20 slides exact\n{table.rstrip()}")


@pytest.fixture(scope="module")
def thousand_tiles(tmp_path_factory):
    root = tmp_path_factory.mktemp("det")
    tiles_dir = root / "tiles"
    tiles_dir.mkdir()
    spec = synthgen.SynthSpec(n_nuclei=40, class_mix=(0.1, 0.2, 0.3, 0.4), seed=8)
    grouped = {}
    for s in range(10):
        for st in synthgen.generate_slide(replace(spec, seed=8 + s), 100, f"slide{s:02d}"):
            write_png(st.tile.image, tiles_dir / f"{st.tile.tile_id}.png")
            grouped[(st.tile.slide_id, st.tile.tile_id)] = st.keypoints
    write_keypoints(root / "keypoints.tsv", grouped)
    (root / "ref.profile").write_text(format_profile(spec.profile))
    return root


def test_8_determinism_and_throughput(report, thousand_tiles, capsys):
    root = thousand_tiles
    args = ["score", "--tiles", str(root / "tiles"), "--keypoints", str(root / "keypoints.tsv"),
            "--profile", str(root / "ref.profile")]
    times = {}
    for threads in (1, 8):
        start = time.perf_counter()
        code = main(args + ["--threads", str(threads), "--out", str(root / f"r{threads}.json")])
        times[threads] = time.perf_counter() - start
        assert code == 0
    capsys.readouterr()
    same = (root / "r1.json").read_bytes() == (root / "r8.json").read_bytes()
    n_tiles = json.loads((root / "r1.json").read_text())["pooled"]["provenance"]["tiles"]
    report(8, "cmd_score determinism and throughput",
           same and n_tiles == 1000 and max(times.values()) < 60,
           f"{n_tiles} tiles, identical={same}, 1 thread {times[1]:.1f}s, "
           f"8 threads {times[8]:.1f}s")

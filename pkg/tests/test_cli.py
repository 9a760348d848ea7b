import json

import numpy as np
import pytest
from PIL import Image

from hscore.annotations import read_keypoints
from hscore.cli import main, read_manifest, split_sizes


def _raster(tmp_path, blank_quadrant=False):
    rng = np.random.default_rng(0)
    img = rng.integers(60, 200, size=(1000, 1000, 3), dtype=np.uint8)
    if blank_quadrant:
        img[400:, 400:] = 128  # the whole bottom-right tile window
    path = tmp_path / "slideA.png"
    Image.fromarray(img).save(path)
    return path


def test_tile_four_tiles(tmp_path):
    raster = _raster(tmp_path)
    assert main(["tile", str(raster), "--mpp", "0.25", "--out", str(tmp_path / "t")]) == 0
    rows = read_manifest(tmp_path / "t" / "manifest.tsv")
    assert len(rows) == 4 and all(r[6] == "kept" for r in rows)
    assert Image.open(tmp_path / "t" / rows[0][8]).size == (512, 512)


def test_tile_blank_quadrant_filtered(tmp_path):
    raster = _raster(tmp_path, blank_quadrant=True)
    (tmp_path / "slideA.png.mpp").write_text("microns_per_pixel=0.25\n")
    assert main(["tile", str(raster), "--out", str(tmp_path / "t")]) == 0
    rows = read_manifest(tmp_path / "t" / "manifest.tsv")
    kept = [r for r in rows if r[6] == "kept"]
    filtered = [r for r in rows if r[6] == "filtered"]
    assert len(kept) == 3 and len(filtered) == 1
    assert filtered[0][7] == "std<min" and filtered[0][2:4] == ["400", "400"]


def test_tile_missing_file(tmp_path, capsys):
    assert main(["tile", str(tmp_path / "missing.png"), "--mpp", "0.25"]) == 2
    assert "missing.png" in capsys.readouterr().err


def test_split_sizes():
    assert split_sizes(5, (3, 1, 1)) == (3, 1, 1)
    assert split_sizes(7, (3, 1, 1)) == (5, 1, 1)


def _manifest(tmp_path, n):
    lines = [f"t{i}\tslideA\t0\t0\t400\t0.25\tkept\t\tt{i}.png" for i in range(n)]
    path = tmp_path / "manifest.tsv"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.mark.parametrize("n, sizes", [(5, (3, 1, 1)), (7, (5, 1, 1))])
def test_split_counts_and_determinism(tmp_path, n, sizes):
    m = _manifest(tmp_path, n)
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}"
        assert main(["split", str(m), "--seed", "3", "--out", str(out)]) == 0
        parts = [read_manifest(out / f"{p}.tsv") for p in ("train", "val", "test")]
        assert tuple(len(p) for p in parts) == sizes
        assert sorted(r[0] for p in parts for r in p) == sorted(f"t{i}" for i in range(n))
        outs.append([(out / f"{p}.tsv").read_bytes() for p in ("train", "val", "test")])
    assert outs[0] == outs[1]


def test_split_empty_manifest(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("# nothing\n")
    assert main(["split", str(path)]) == 3


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--slides", "2", "--tiles-per-slide", "2", "--nuclei", "20",
                 "--seed", "5", "--out", str(out)]) == 0
    return out


def _expected(bundle):
    rows = {}
    for line in (bundle / "expected.txt").read_text().splitlines():
        if not line.startswith("#"):
            k, _, v = line.partition("=")
            rows[k] = v
    return rows


def test_synth_then_score_matches_sidecar(bundle, tmp_path):
    out = tmp_path / "report.json"
    assert main(["score", "--tiles", str(bundle / "tiles"), "--keypoints",
                 str(bundle / "keypoints.tsv"), "--profile", str(bundle / "reference.profile"),
                 "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    exp = _expected(bundle)
    for comp in report["pooled"]["compartments"]:
        assert repr(comp["hscore"]) == exp[f"pooled.{comp['compartment']}.hscore"]
    for slide in report["slides"]:
        sid = slide["provenance"]["slide_id"]
        for comp in slide["compartments"]:
            assert repr(comp["hscore"]) == exp[f"slide.{sid}.{comp['compartment']}.hscore"]
    assert "config" in report["pooled"]["params"]


def test_score_idempotent_and_thread_independent(bundle, tmp_path):
    args = ["score", "--tiles", str(bundle / "tiles"), "--keypoints", str(bundle / "keypoints.tsv"),
            "--profile", str(bundle / "reference.profile")]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json"), "--threads", "4"]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_render_then_extract_roundtrip(bundle, tmp_path):
    heat = tmp_path / "heat"
    assert main(["render", str(bundle / "keypoints.tsv"), "--out", str(heat)]) == 0
    out = tmp_path / "found.tsv"
    assert main(["extract", *sorted(str(p) for p in heat.glob("*.hmf")), "--out", str(out)]) == 0
    want = read_keypoints(bundle / "keypoints.tsv")
    got = read_keypoints(out)
    assert set(got) == set(want)
    for key, kps in want.items():
        a = sorted((k.cls, k.y, k.x) for k in kps)
        b = sorted((k.cls, k.y, k.x) for k in got[key])
        assert len(a) == len(b)
        for (ca, ya, xa), (cb, yb, xb) in zip(a, b):
            assert ca == cb and abs(ya - yb) <= 1 and abs(xa - xb) <= 1


def test_eval_self_is_one(bundle, tmp_path, capsys):
    tsv = str(bundle / "keypoints.tsv")
    out = tmp_path / "eval.json"
    assert main(["eval", "--pred", tsv, "--gt", tsv, "--baseline", tsv, "--out", str(out),
                 "--set", "bootstrap.resamples=50", "--set", "bootstrap.outer_repeats=2"]) == 0
    report = json.loads(out.read_text())
    assert report["map"] == 1.0 and report["ci"]["mAP"]["lower"] == 0.0
    assert "Lower bound" in capsys.readouterr().out


def test_calibrate_recovers_reference(bundle, tmp_path):
    out = tmp_path / "a.profile"
    assert main(["calibrate", "--tiles", str(bundle / "tiles"), "--annotations",
                 str(bundle / "keypoints.tsv"), "--annotator", "a", "--out", str(out),
                 "--set", "stain.half_side_fraction=0.6", "--loso"]) == 0
    text = out.read_text()
    assert "annotator_id=a" in text and "# command=calibrate" in text
    assert (tmp_path / "a.profile.loso.tsv").is_file()


def test_fuse(bundle, tmp_path):
    tsv = str(bundle / "keypoints.tsv")
    out = tmp_path / "f.tsv"
    assert main(["fuse", tsv, tsv, "--weights", "1", "2", "--out", str(out)]) == 0
    want = read_keypoints(tsv)
    got = read_keypoints(out)
    assert sum(map(len, got.values())) == sum(map(len, want.values()))


def test_constraint_violation_exit_3(tmp_path, capsys):
    assert main(["synth", "--set", "extractor.threshold=2", "--out", str(tmp_path / "x")]) == 3
    assert "extractor.threshold" in capsys.readouterr().err


def test_capacity_violation_exit_3(tmp_path):
    assert main(["synth", "--nuclei", "5000", "--slides", "1", "--tiles-per-slide", "1",
                 "--set", "tile.output_px=64", "--out", str(tmp_path / "x")]) == 3


def test_missing_profile_exit_2(bundle):
    assert main(["score", "--tiles", str(bundle / "tiles"), "--keypoints",
                 str(bundle / "keypoints.tsv"), "--profile", "/nonexistent.profile"]) == 2

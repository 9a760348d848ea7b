import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hscore import synthgen
from hscore.errors import CapacityError, DomainError
from hscore.imaging import is_empty_tile
from hscore.keypoints import ExtractorParams, extract_keypoints, render_heatmap
from hscore.staining import classify_nucleus, compute_hscore, score_tiles


def test_deterministic_per_seed():
    spec = synthgen.SynthSpec(n_nuclei=30, seed=99)
    a, b = synthgen.generate_tile(spec), synthgen.generate_tile(spec)
    assert np.array_equal(a.tile.image, b.tile.image) and a.keypoints == b.keypoints
    c = synthgen.generate_tile(synthgen.SynthSpec(n_nuclei=30, seed=100))
    assert not np.array_equal(a.tile.image, c.tile.image)


def test_zero_nuclei():
    st_ = synthgen.generate_tile(synthgen.SynthSpec(n_nuclei=0))
    assert st_.keypoints == [] and st_.hscores == {"stroma": None, "epithelium": None}
    assert (st_.tile.image == synthgen.SynthSpec().background).all()


def test_all_strong_is_300():
    st_ = synthgen.generate_tile(synthgen.SynthSpec(n_nuclei=20, class_mix=(0, 0, 0, 1), seed=2))
    assert st_.hscores == {"stroma": 300.0, "epithelium": 300.0}


def test_planted_mix_full_pipeline_gives_200():
    spec = synthgen.SynthSpec(n_nuclei=100, class_mix=(0.1, 0.2, 0.3, 0.4), nucleus_radius=12,
                              seed=8)
    st_ = synthgen.generate_tile(spec)
    assert st_.hscores == {"stroma": 200.0, "epithelium": 200.0}
    heat = render_heatmap(st_.keypoints, spec.size, spec.size, 4.0)
    found = extract_keypoints(heat, ExtractorParams(0.5, 12.0))
    assert len(found) == 100
    report = score_tiles([(st_.tile, found)], spec.profile)
    assert report.hscores == {"stroma": 200.0, "epithelium": 200.0}


def test_capacity_error_names_constraint():
    with pytest.raises(CapacityError, match="separation"):
        synthgen.generate_tile(synthgen.SynthSpec(size=64, n_nuclei=40, attempts_per_nucleus=50))


def test_spec_invariants():
    with pytest.raises(DomainError):
        synthgen.SynthSpec(class_mix=(0.5, 0.5, 0.5, 0))
    with pytest.raises(DomainError):
        synthgen.SynthSpec(min_separation=30)
    with pytest.raises(DomainError, match="within 5"):
        synthgen.SynthSpec(value_pins={"strong": (77,)})


def test_not_an_empty_tile():
    assert not is_empty_tile(synthgen.generate_tile(synthgen.SynthSpec(n_nuclei=20, seed=3)).tile)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 40))
def test_planted_labels_reproduced_and_placement_valid(seed, n):
    spec = synthgen.SynthSpec(n_nuclei=n, seed=seed)
    st_ = synthgen.generate_tile(spec)
    xy = np.array([[k.x, k.y] for k in st_.keypoints]).reshape(-1, 2)
    r = spec.nucleus_radius
    assert ((xy >= r) & (xy <= spec.size - 1 - r)).all()
    if n > 1:
        d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
        assert d[~np.eye(n, dtype=bool)].min() >= spec.separation
    for kp in st_.keypoints:
        assert classify_nucleus(st_.tile, kp, spec.profile) == kp.label
    assert st_.hscores == compute_hscore(st_.counts)


def test_split_counts_sums():
    assert synthgen.split_counts(100, (0.1, 0.2, 0.3, 0.4)) == [10, 20, 30, 40]
    assert sum(synthgen.split_counts(7, (0.25,) * 4)) == 7


def test_calibration_set_shape():
    cal = synthgen.calibration_set(slides=3, tiles_per_slide=2, nuclei=20, seed=1)
    assert cal.slides() == ["slide1", "slide2", "slide3"] and len(cal.items) == 6

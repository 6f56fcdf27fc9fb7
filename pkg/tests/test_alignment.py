import numpy as np
import pytest

from facade3d.alignment import (
    Alignment2D,
    Correspondence,
    align_group,
    align_group_report,
    detect_and_match,
    estimate_alignment,
    resample_into,
)
from facade3d.errors import InsufficientMatches
from facade3d.ortho import ConstantOracle, ortho_from_volume
from facade3d.synthetic import SynthConfig, generate_building, render_facade_ortho


@pytest.fixture(scope="module")
def building():
    return generate_building(SynthConfig(seed=11, n_facades=1, facade_size=(8.0, 6.0)))[0]


@pytest.fixture(scope="module")
def pair(building):
    ref = render_facade_ortho(building, 0, 0.02, margin=0.3, source_id="ref")
    src = render_facade_ortho(building, 0, 0.02, margin=0.3, shift=(0.2, 0.0), source_id="src")
    return ref, src


def test_identical_images_match_in_place(pair):
    ref, _ = pair
    corrs = detect_and_match(ref, ref)
    assert len(corrs) >= 20
    assert all(c.src == c.ref for c in corrs)


def test_uniform_images_have_no_matches():
    flat = ortho_from_volume(ConstantOracle((90, 90, 90, 255)), ([0, 0, 0], [4, 0, 0], [0, 0, 3]), 0.02)
    assert detect_and_match(flat, flat) == []


def test_shifted_copy_matches_are_displaced(pair):
    ref, src = pair
    corrs = detect_and_match(ref, src)
    d = np.array([np.subtract(c.ref, c.src) for c in corrs])
    assert len(d) >= 20
    assert np.median(d[:, 0]) == pytest.approx(10.0, abs=0.5)
    assert np.median(d[:, 1]) == pytest.approx(0.0, abs=0.5)


def grid_corrs(shift=(0.0, 0.0), scale=1.0, n=40, seed=0):
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 400, (n, 2))
    ref = scale * src + shift
    return [Correspondence(tuple(a), tuple(b)) for a, b in zip(src, ref)]


def test_estimate_alignment_examples():
    a = estimate_alignment(grid_corrs())
    assert (a.scale, a.tx, a.ty) == pytest.approx((1.0, 0.0, 0.0), abs=1e-9)
    a = estimate_alignment(grid_corrs((10.0, 0.0)))
    assert (a.scale, a.tx, a.ty) == pytest.approx((1.0, 10.0, 0.0), abs=0.1)
    a = estimate_alignment(grid_corrs((3.0, -7.0), scale=1.25))
    assert (a.scale, a.tx, a.ty) == pytest.approx((1.25, 3.0, -7.0), abs=1e-6)
    with pytest.raises(InsufficientMatches):
        estimate_alignment(grid_corrs(n=3))


def noisy_shift_trial(seed, outlier_frac=0.3, n=60, shift=(10.0, 0.0)):
    """Inliers with 0.3 px noise around ``shift`` plus uniformly random outliers."""
    rng = np.random.default_rng(seed)
    src = rng.uniform(0, 500, (n, 2))
    ref = src + shift + rng.normal(0, 0.3, (n, 2))
    bad = rng.random(n) < outlier_frac
    ref[bad] = rng.uniform(0, 500, (bad.sum(), 2))
    corrs = [Correspondence(tuple(a), tuple(b)) for a, b in zip(src, ref)]
    a = estimate_alignment(corrs, seed=seed)
    return np.hypot(a.tx - shift[0], a.ty - shift[1]), abs(a.scale - 1.0)


def test_outlier_tolerance_single_seed():
    err, serr = noisy_shift_trial(0)
    assert err < 0.5 and serr < 0.01


def test_self_alignment_is_identity(pair):
    ref, _ = pair
    aligned, recs = align_group_report([ref, ref.with_pixels(ref.pixels.copy(), source_id="copy")])
    t = recs[1].transform
    assert abs(t.scale - 1) < 1e-3 and np.hypot(t.tx, t.ty) < 0.2
    assert len(aligned) == 2


def test_single_image_is_returned_unchanged(pair):
    ref, _ = pair
    out = align_group([ref])
    assert out[0] is ref


def test_shifted_copy_is_resampled_onto_reference(pair):
    ref, src = pair
    out, recs = align_group_report([ref, src])
    assert [r.status for r in recs] == ["reference", "aligned"]
    assert recs[1].transform.tx == pytest.approx(10.0, abs=0.5)
    moved = out[1]
    assert (moved.width, moved.height, moved.pixel_size) == (ref.width, ref.height, ref.pixel_size)
    both = moved.foreground & ref.foreground
    diff = np.abs(moved.pixels[both, :3].astype(float) - ref.pixels[both, :3].astype(float)).mean()
    assert diff < 3.0


def test_resampling_never_invents_foreground(pair):
    ref, _ = pair
    holey = ref.pixels.copy()
    holey[50:80, 50:80] = 0
    src = ref.with_pixels(holey)
    out = resample_into(src, ref, Alignment2D(1.0, 2.5, -1.5))
    assert not out.foreground[50 - 2 : 80 - 2, 53:82].any()


def test_unalignable_view_is_dropped(pair):
    ref, _ = pair
    flat = ref.with_pixels(np.where(ref.pixels > 0, 120, 0).astype(np.uint8), source_id="flat")
    out, recs = align_group_report([ref, flat])
    assert len(out) == 1 and recs[1].status == "dropped"

import json

import numpy as np
import pytest

from facade3d.errors import ConfigError, DomainError
from facade3d.fusion import (
    Detection,
    FusionConfig,
    cluster_by_iou,
    detections_document,
    filter_single_view,
    fuse_multiview,
    iou,
    iou_matrix,
    load_detections,
    save_detections,
)

from oracles import box_iou, iou_closure
from scenes import rng_boxes


def det(box, score=0.9, src="a", cat=1):
    return Detection(tuple(box), score, cat, src)


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    B = rng_boxes(rng, 12)
    M = iou_matrix(B)
    for i in range(12):
        for j in range(12):
            assert M[i, j] == pytest.approx(box_iou(B[i], B[j]), abs=1e-12)


def test_coincident_pair_is_merged_with_sqrt_mean_score():
    out = fuse_multiview([det((10, 10, 20, 30), 0.36, "a"), det((10, 10, 20, 30), 0.64, "b")])
    assert len(out) == 1
    assert out[0].score == pytest.approx(0.7, abs=1e-15)
    assert out[0].bbox == (10, 10, 20, 30)


def test_single_view_window_is_rejected():
    assert fuse_multiview([det((10, 10, 20, 30), 0.9)]) == []


def test_low_merged_score_is_rejected():
    # sqrt(0.04) = 0.2, sqrt(0.16) = 0.4, mean 0.3 < 0.4
    assert fuse_multiview([det((0, 0, 5, 5), 0.04), det((0, 0, 5, 5), 0.16)], FusionConfig(tau_conf=0.0)) == []


def test_single_view_filter():
    assert filter_single_view([det((0, 0, 1, 1), 0.15)], 0.2) == []
    assert len(filter_single_view([det((0, 0, 1, 1), 0.2)], 0.2)) == 1
    assert filter_single_view([], 0.2) == []


def test_categories_do_not_mix():
    out = fuse_multiview([det((0, 0, 5, 5), cat=1), det((0, 0, 5, 5), cat=2, src="b")])
    assert out == []


def test_distinct_source_counting():
    same_view = [det((0, 0, 5, 5), src="a"), det((0, 0, 5, 5.2), src="a")]
    assert len(fuse_multiview(same_view)) == 1
    assert fuse_multiview(same_view, FusionConfig(count_distinct_sources=True)) == []


def test_config_ranges():
    with pytest.raises(ConfigError):
        FusionConfig(tau_iou=1.5)
    with pytest.raises(ConfigError):
        FusionConfig(n_min=0)
    with pytest.raises(DomainError):
        det((5, 0, 1, 1))


def random_views(rng, n_windows=6, n_views=3):
    """Per-view jittered copies of a few windows plus some clutter."""
    base = rng_boxes(rng, n_windows, 300)
    dets = []
    for v in range(n_views):
        for b in base:
            if rng.random() < 0.8:
                j = b + rng.normal(0, 1.5, 4).clip(-3, 3)
                j = (min(j[0], j[2]), min(j[1], j[3]), max(j[0], j[2]), max(j[1], j[3]))
                dets.append(det(j, float(rng.uniform(0.05, 1)), f"v{v}"))
        for b in rng_boxes(rng, int(rng.integers(0, 3)), 300):
            dets.append(det(b, float(rng.uniform(0.05, 1)), f"v{v}", int(rng.integers(1, 3))))
    return dets


def members_of(fused, dets, cfg=FusionConfig()):
    kept = [d for d in dets if d.score >= cfg.tau_conf and d.category_id == fused.category_id]
    for idxs in cluster_by_iou([d.bbox for d in kept], cfg.tau_iou):
        group = [kept[i] for i in idxs]
        if np.allclose(np.median([d.bbox for d in group], axis=0), fused.bbox, atol=0):
            return group
    raise AssertionError("fused box does not come from any cluster")


def fusion_property_violations(trials=200, seed=0):
    rng = np.random.default_rng(seed)
    bad = {"order": 0, "hull": 0, "duplicate": 0}
    for _ in range(trials):
        dets = random_views(rng)
        ref = fuse_multiview(dets)
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        if fuse_multiview(shuffled) != ref:
            bad["order"] += 1
        for f in ref:
            B = np.array([d.bbox for d in members_of(f, dets)])
            if not (np.all(f.bbox >= B.min(axis=0) - 1e-12) and np.all(f.bbox <= B.max(axis=0) + 1e-12)):
                bad["hull"] += 1
        doubled = dets + [Detection(d.bbox, d.score, d.category_id, d.source_id + "-dup") for d in dets]
        boxes2 = {f.bbox for f in fuse_multiview(doubled)}
        if not {f.bbox for f in ref} <= boxes2:
            bad["duplicate"] += 1
    return bad


def test_fusion_properties_hold():
    assert fusion_property_violations(60, seed=1) == {"order": 0, "hull": 0, "duplicate": 0}


def test_components_match_brute_force_closure():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        B = rng_boxes(rng, n, 60)
        fast = frozenset(frozenset(c) for c in cluster_by_iou(B, 0.3))
        assert fast == iou_closure(B, 0.3)


def test_detection_file_round_trip_and_png_frame(tmp_path):
    dets = [det((1, 2, 3, 4), 0.5, "v0")]
    save_detections(tmp_path / "d.json", [detections_document("c000", dets)])
    assert load_detections(tmp_path / "d.json") == {"c000": dets}
    png = {"facade_id": "f", "frame": "png", "image_height": 100, "detections": [d.to_dict() for d in dets]}
    (tmp_path / "p.json").write_text(json.dumps(png))
    assert load_detections(tmp_path / "p.json")["f"][0].bbox == (1, 96, 3, 98)
    (tmp_path / "bad.json").write_text(json.dumps({"detections": []}))
    with pytest.raises(ConfigError):
        load_detections(tmp_path / "bad.json")

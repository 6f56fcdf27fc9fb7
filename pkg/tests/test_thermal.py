import numpy as np
import pytest

from facade3d.errors import DegenerateFacade, InvariantViolation, OutOfFacade
from facade3d.fusion import Detection
from facade3d.geometry import Plane, plane_basis
from facade3d.thermal import (
    assemble_model,
    bbox_to_world,
    compute_wwr,
    dumps_model,
    load_model,
    loads_model,
    make_facade,
    save_model,
    union_area,
    with_windows,
)

from oracles import raster_union_area

PLANE = Plane((0.0, -1.0, 0.0), 2.0)  # y = -2, facing -y


def facade(width_px=500, height_px=1000, pixel_size=0.02, origin=(0.0, 0.0), fid="f0"):
    return make_facade(fid, PLANE, plane_basis(PLANE), (0, 0, width_px, height_px), origin, width_px, height_px, pixel_size)


def box(x0, y0, x1, y1, score=1.0):
    return Detection((x0, y0, x1, y1), score, 1, "v")


def test_bbox_size_in_metres():
    w = bbox_to_world(box(100, 50, 160, 125), facade())
    assert (w.width_m, w.height_m) == pytest.approx((1.2, 1.5), abs=1e-12)
    assert w.area_m2 == pytest.approx(1.8, abs=1e-12)


def test_window_corners_lie_on_the_plane():
    f = facade(origin=(-3.0, 1.5))
    w = bbox_to_world(box(10.5, 20.25, 90, 300), f)
    for c in w.corners:
        assert PLANE.signed_distance(np.array(c)) == pytest.approx(0.0, abs=1e-9)
    # the first corner maps back to the box's lower-left in plane coordinates
    uv = f.plane_basis().to_plane(np.array(w.corners[0]))
    assert uv == pytest.approx((-3.0 + 10.5 * 0.02, 1.5 + 20.25 * 0.02), abs=1e-12)


def test_box_outside_facade_is_rejected():
    with pytest.raises(OutOfFacade):
        bbox_to_world(box(450, 10, 520, 40), facade())
    with pytest.raises(OutOfFacade):
        bbox_to_world(box(-5, 10, 20, 40), facade())


def test_wwr_worked_example():
    # 10 m x 20 m facade with ten 2.5 m x 2.0 m windows
    f = facade(width_px=500, height_px=1000)
    wins = [bbox_to_world(box(250 * c, 200 * r, 250 * c + 125, 200 * r + 100), f) for r in range(5) for c in range(2)]
    assert sum(w.area_m2 for w in wins) == pytest.approx(50.0, abs=1e-9)
    assert compute_wwr(f, wins) == pytest.approx(0.25, abs=1e-12)
    assert compute_wwr(f, []) == 0.0


def test_overlapping_windows_count_once():
    f = facade(width_px=100, height_px=100)  # 2 m x 2 m
    a = bbox_to_world(box(0, 0, 50, 50), f)
    b = bbox_to_world(box(25, 25, 75, 75), f)
    # two 1 m^2 windows overlapping by 0.25 m^2
    assert compute_wwr(f, [a, b]) == pytest.approx(1.75 / 4.0, abs=1e-12)
    assert compute_wwr(f, [a, a]) == pytest.approx(0.25, abs=1e-12)


def test_union_area_matches_raster_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(0, 7))
        lo = rng.uniform(0, 8, (n, 2))
        rects = [tuple(lo[i]) + tuple(lo[i] + rng.uniform(0.2, 2.0, 2)) for i in range(n)]
        rects = [tuple(np.round(r, 2)) for r in rects]
        assert union_area(rects) == pytest.approx(raster_union_area(rects, 0.0005), abs=0.02)


def test_wwr_is_independent_of_pixel_size():
    coarse = facade(width_px=250, height_px=500, pixel_size=0.04)
    fine = facade(width_px=500, height_px=1000, pixel_size=0.02)
    wc = compute_wwr(coarse, [bbox_to_world(box(10, 20, 60, 80), coarse)])
    wf = compute_wwr(fine, [bbox_to_world(box(20, 40, 120, 160), fine)])
    assert wc == pytest.approx(wf, abs=1e-12)


def test_zero_area_facade_is_degenerate():
    with pytest.raises(DegenerateFacade):
        compute_wwr(facade(width_px=0), [])


def test_model_round_trip(tmp_path):
    f = facade()
    f = with_windows(f, [bbox_to_world(box(100, 50, 160, 125, 0.8), f)])
    fp = [(0, 0, 0), (10, 0, 0), (10, 8, 0), (0, 8, 0)]
    m = assemble_model([f], footprint=fp, building_id="b1", properties={"pixel_size": 0.02})
    assert len(m.facades) == 1 and len(m.facades[0].windows) == 1
    assert m.footprint == tuple(tuple(map(float, p)) for p in fp)
    back = load_model(save_model(m, tmp_path / "m.json"))
    assert back == m
    assert dumps_model(loads_model(dumps_model(m))) == dumps_model(m)


def test_model_invariants():
    with pytest.raises(InvariantViolation):
        assemble_model([])
    with pytest.raises(InvariantViolation):
        assemble_model([facade(fid="a"), facade(fid="a")])

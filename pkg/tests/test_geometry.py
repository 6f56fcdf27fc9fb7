import math
import warnings

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from facade3d.errors import BehindCamera, DegenerateTriangle, DomainError, ParallelRay
from facade3d.geometry import (
    PanoPose,
    Plane,
    RigidTransform,
    ScaleSpreadWarning,
    estimate_scale_from_triangle,
    pixel_to_dir,
    pixels_to_dirs,
    plane_basis,
    project_points_to_pano,
    project_world_to_pano,
    ray_plane_intersect,
    transform_plane,
)

W, H = 2048, 1024
IDENTITY = PanoPose((0.0, 0.0, 0.0))


def test_pixel_to_dir_cardinal_directions():
    assert np.allclose(pixel_to_dir(W / 2, H / 2, W, H, IDENTITY), [0, 1, 0])
    assert np.allclose(pixel_to_dir(W / 2, 0, W, H, IDENTITY), [0, 0, 1])
    assert np.allclose(pixel_to_dir(3 * W / 4, H / 2, W, H, IDENTITY), [1, 0, 0])


def test_heading_rotates_clockwise_seen_from_above():
    east = PanoPose((0, 0, 0), heading=90.0)
    assert np.allclose(pixel_to_dir(W / 2, H / 2, W, H, east), [1, 0, 0])


def test_ray_plane_intersect_examples():
    wall = Plane((0, 1, 0), 5.0)
    assert np.allclose(ray_plane_intersect((0, 0, 0), (0, 1, 0), wall), [0, 5, 0])
    with pytest.raises(ParallelRay):
        ray_plane_intersect((0, 0, 0), (1, 0, 0), wall)
    with pytest.raises(BehindCamera):
        ray_plane_intersect((0, 10, 0), (0, 1, 0), wall)


def test_project_world_to_pano_examples():
    pose = PanoPose((3.0, -2.0, 1.5))
    u, v = project_world_to_pano(np.add(pose.position, (0, 1, 0)), pose, W, H)
    assert (u, v) == pytest.approx((W / 2, H / 2))
    u, v = project_world_to_pano(np.add(pose.position, (0, 0, 1)), pose, W, H)
    assert (u, v) == pytest.approx((W / 2, 0.0))


def test_transform_plane_examples():
    p = Plane((0, 1, 0), 5.0)
    same = transform_plane(p, RigidTransform())
    assert np.allclose(same.normal, p.normal) and same.d == pytest.approx(5.0)
    moved = transform_plane(p, RigidTransform(np.eye(3), (0, 2, 0)))
    assert np.allclose(moved.normal, (0, 1, 0)) and moved.d == pytest.approx(7.0)
    c, s = 0.0, 1.0
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    turned = transform_plane(Plane((1, 0, 0), 3.0), RigidTransform(rz, (0, 0, 0)))
    assert np.allclose(turned.normal, (0, 1, 0)) and turned.d == pytest.approx(3.0)


def test_plane_basis_examples():
    b = plane_basis(Plane((0, 1, 0), 5.0))
    assert abs(b.u[0]) == pytest.approx(1.0) and np.allclose(b.u[1:], 0)
    assert np.allclose(b.v, (0, 0, 1))
    g = plane_basis(Plane((0, 0, 1), 0.0))
    assert np.allclose(g.u, (1, 0, 0)) and np.allclose(g.v, (0, 1, 0))


def test_triangle_scale_examples():
    eq = [(0, 0, 0), (1, 0, 0), (0.5, math.sqrt(3) / 2, 0)]
    assert estimate_scale_from_triangle(eq, [8, 8, 8]) == pytest.approx(8.0)
    # sides opposite each vertex: 1, 2, 2
    tri = [(0, 0, 0), (1, 0, 0), (0.5, math.sqrt(15) / 2, 0)]
    assert estimate_scale_from_triangle(tri, [2 * 3, 2 * 3, 3]) == pytest.approx(3.0)
    with pytest.warns(ScaleSpreadWarning):
        assert estimate_scale_from_triangle(eq, [3, 4, 5]) == pytest.approx(4.0)
    with pytest.raises(DegenerateTriangle):
        estimate_scale_from_triangle([(0, 0, 0)] * 3, [1, 1, 1])


def test_plane_rejects_non_unit_normal():
    with pytest.raises(DomainError):
        Plane((0, 2, 0), 1.0)
    assert Plane.from_coeffs(0, 2, 0, 4).d == pytest.approx(2.0)


unit3 = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: 0.1 < np.linalg.norm(v))
angles = st.floats(-180, 180, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(unit3, angles, st.floats(-80, 80), st.floats(-30, 30), st.floats(-20, 20))
def test_transform_plane_keeps_points_on_plane(n, heading, pitch, roll, d):
    n = np.array(n) / np.linalg.norm(n)
    local = Plane(tuple(n), d)
    t = RigidTransform.from_pose(PanoPose((1.0, -4.0, 2.5), heading, pitch, roll))
    world = transform_plane(local, t)
    b = plane_basis(local)
    rng = np.random.default_rng(0)
    pts = b.to_world(rng.uniform(-50, 50, (100, 2)))
    assert np.max(np.abs(world.signed_distance(t.apply(pts)))) < 1e-9


@settings(max_examples=60, deadline=None)
@given(unit3, st.floats(-30, 30))
@example(n=(0.125, 0.0, 1.0), d=0.0)  # near-horizontal plane
def test_plane_basis_is_orthonormal_with_up_v(n, d):
    n = np.array(n) / np.linalg.norm(n)
    b = plane_basis(Plane(tuple(n), d))
    assert abs(b.u @ b.v) < 1e-9
    assert np.allclose(np.cross(b.u, b.v), b.n)
    assert b.v[2] >= 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), angles, st.floats(-45, 45))
def test_triangle_scale_rigid_invariance_and_scaling(k, heading, pitch):
    P = np.array([[0, 0, 0], [2.0, 0.3, 0], [0.7, 1.9, 0.4]])
    L = [5.0, 6.0, 7.0]
    t = RigidTransform.from_pose(PanoPose((3, 1, -2), heading, pitch))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ScaleSpreadWarning)
        base = estimate_scale_from_triangle(P, L)
        assert estimate_scale_from_triangle(t.apply(P), L) == pytest.approx(base, rel=1e-9)
        assert estimate_scale_from_triangle(k * P, L) == pytest.approx(base / k, rel=1e-9)


def test_dirs_are_unit_vectors():
    rng = np.random.default_rng(1)
    pose = PanoPose((0, 0, 2), 37.0, 4.0, -3.0)
    d = pixels_to_dirs(rng.uniform(0, W, 5000), rng.uniform(0, H, 5000), W, H, pose)
    assert np.max(np.abs(np.linalg.norm(d, axis=1) - 1)) < 1e-9


def pano_plane_round_trip_errors(draws=1000, seed=0):
    """Pixel -> ray -> random plane hit -> pixel, for forward hits only."""
    rng = np.random.default_rng(seed)
    errs = []
    while len(errs) < draws:
        pose = PanoPose(rng.uniform(-20, 20, 3), rng.uniform(0, 360), rng.uniform(-10, 10), rng.uniform(-10, 10))
        x, y = rng.uniform(0, W), rng.uniform(1, H - 1)
        ray = pixel_to_dir(x, y, W, H, pose)
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        plane = Plane(tuple(n), float(n @ pose.pos + rng.uniform(-30, 30)))
        try:
            p = ray_plane_intersect(pose.pos, ray, plane)
        except (ParallelRay, BehindCamera):
            continue
        u, v, _ = project_points_to_pano(p[None], pose, W, H)
        du = (u[0] - x + W / 2) % W - W / 2  # seam wrap
        errs.append(math.hypot(du, v[0] - y))
    return np.array(errs)


def test_pano_plane_round_trip():
    assert pano_plane_round_trip_errors().max() < 0.5

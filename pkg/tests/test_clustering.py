import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facade3d.clustering import (
    SegmentRef,
    average_linkage,
    cluster_planes,
    cluster_report,
    clusters_from_report,
    is_facade_candidate,
    pairwise_plane_distances,
    plane_distance,
)
from facade3d.errors import EmptyClusterSet
from facade3d.geometry import Plane

from conftest import make_pano
from oracles import brute_average_linkage, partition


def test_plane_distance_examples():
    wall = Plane((0, 1, 0), 5.0)
    assert plane_distance(wall, wall) == 0.0
    assert abs(plane_distance(wall, Plane((0, 1, 0), 6.0)) - 0.01) < 1e-12
    assert abs(plane_distance(wall, Plane((1, 0, 0), 5.0)) - 1.0) < 1e-12


def test_facade_candidates():
    assert not is_facade_candidate(Plane((0, 0, 1), 0.0))
    assert is_facade_candidate(Plane((0, 1, 0), 4.0))
    assert not is_facade_candidate([0, 0, 0, 0])
    assert not is_facade_candidate(Plane.zero())
    assert is_facade_candidate([0, 3, 0, 12])


def wall_pano(pid, ds):
    return make_pano(pid, (0, 0, 0), planes=[(0, 1, 0, d) for d in ds])


def test_small_offset_difference_merges():
    out = cluster_planes([wall_pano("a", [5.0]), wall_pano("b", [5.0009])])
    assert len(out) == 1 and len(out[0].members) == 2


def test_larger_offset_difference_splits():
    assert len(cluster_planes([wall_pano("a", [5.0]), wall_pano("b", [5.002])])) == 2


def test_single_wall_and_empty_input():
    out = cluster_planes([wall_pano("a", [5.0])])
    assert len(out) == 1 and out[0].members == [SegmentRef("a", 0)]
    with pytest.raises(EmptyClusterSet):
        cluster_planes([make_pano("g", planes=[(0, 0, 1, 0)])])


def test_horizontal_and_zero_planes_are_skipped():
    p = make_pano("a", planes=[(0, 0, 1, 0), (0, 0, 0, 0), (1, 0, 0, 3)])
    out = cluster_planes([p])
    assert [m.plane_idx for c in out for m in c.members] == [2]


def test_world_frame_is_used():
    # the same wall y = 10 seen from two panoramas at different positions
    a = make_pano("a", (0, 0, 0), planes=[(0, 1, 0, 10)])
    b = make_pano("b", (0, 4, 0), planes=[(0, 1, 0, 6)])
    out = cluster_planes([a, b])
    assert len(out) == 1
    assert out[0].world_plane.d == pytest.approx(10.0)


unit = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: 0.2 < math.hypot(*v))


@settings(max_examples=50, deadline=None)
@given(unit, unit, st.floats(-50, 50), st.floats(-50, 50))
def test_plane_distance_symmetric_nonnegative(n1, n2, d1, d2):
    p = Plane(tuple(np.array(n1) / np.linalg.norm(n1)), d1)
    q = Plane(tuple(np.array(n2) / np.linalg.norm(n2)), d2)
    assert plane_distance(p, q) == pytest.approx(plane_distance(q, p), abs=1e-15)
    assert plane_distance(p, q) >= -1e-15
    assert plane_distance(p, p) <= 1e-15


def jittered_families(rng, n):
    """Planes drawn around a few facade planes, spread so distances straddle the cutoff."""
    fams = [(np.array([math.cos(a), math.sin(a), 0.0]), rng.uniform(2, 30)) for a in rng.uniform(0, 2 * math.pi, 3)]
    planes = []
    for _ in range(n):
        nrm, d = fams[rng.integers(len(fams))]
        tilt = rng.normal(scale=2e-3, size=3)
        n2 = nrm + tilt * (rng.random() < 0.3)
        n2 = n2 / np.linalg.norm(n2)
        planes.append(Plane(tuple(n2), d + rng.uniform(0, 2e-3)))
    return planes


def test_average_linkage_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(150):
        planes = jittered_families(rng, int(rng.integers(2, 13)))
        D = pairwise_plane_distances(planes)
        fast = partition(average_linkage(D, 1e-5))
        slow = partition(brute_average_linkage(D, 1e-5))
        assert fast == slow


def test_cluster_permutation_invariance():
    rng = np.random.default_rng(3)
    panos = [make_pano(f"p{k}", planes=[p.to_list() for p in jittered_families(rng, 4)]) for k in range(4)]
    ref = {frozenset(c.members) for c in cluster_planes(panos)}
    for _ in range(5):
        order = rng.permutation(len(panos))
        assert {frozenset(c.members) for c in cluster_planes([panos[i] for i in order])} == ref


def test_cluster_report_round_trip():
    out = cluster_planes([wall_pano("a", [5.0, 9.0]), wall_pano("b", [5.0004])])
    back = clusters_from_report(cluster_report(out))
    assert [c.members for c in back] == [c.members for c in out]
    assert [c.world_plane for c in back] == [c.world_plane for c in out]

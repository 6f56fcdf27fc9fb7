"""Group plane segments from many panoramas into physical facades."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .dataset import PanoRecord
from .errors import EmptyClusterSet
from .geometry import Plane, transform_plane

logger = logging.getLogger(__name__)

NORMAL_WEIGHT = 1.0
OFFSET_WEIGHT = 0.01
DEFAULT_THRESHOLD = 1e-5
HORIZONTAL_NZ = 0.9


class SegmentRef(NamedTuple):
    pano_id: str
    plane_idx: int

    def key(self) -> str:
        return f"{self.pano_id}:{self.plane_idx}"

    @classmethod
    def parse(cls, key: str) -> "SegmentRef":
        pano_id, idx = key.rsplit(":", 1)
        return cls(pano_id, int(idx))


@dataclass(eq=False)
class PlaneCluster:
    cluster_id: int
    members: list[SegmentRef]
    world_plane: Plane
    member_planes: list[Plane]


def plane_distance(p1: Plane, p2: Plane) -> float:
    """Cosine distance between normals plus 0.01 times the offset difference."""
    cos = float(np.dot(p1.normal, p2.normal))
    return NORMAL_WEIGHT * (1.0 - cos) + OFFSET_WEIGHT * abs(p1.d - p2.d)


def pairwise_plane_distances(planes: Sequence[Plane]) -> np.ndarray:
    N = np.array([p.normal for p in planes], dtype=float).reshape(-1, 3)
    d = np.array([p.d for p in planes], dtype=float)
    D = NORMAL_WEIGHT * (1.0 - N @ N.T) + OFFSET_WEIGHT * np.abs(d[:, None] - d[None, :])
    np.fill_diagonal(D, 0.0)
    return D


def is_facade_candidate(p) -> bool:
    """False for horizontal planes (``|n_z| > 0.9``) and zero-plane placeholders.

    Accepts a :class:`Plane` or raw ``[a, b, c, d]`` coefficients.
    """
    if not isinstance(p, Plane):
        a, b, c = (float(x) for x in list(p)[:3])
        if np.linalg.norm([a, b, c]) < 1e-9:
            return False
        p = Plane.from_coeffs(a, b, c, list(p)[3])
    if p.is_zero:
        return False
    return abs(p.normal[2]) <= HORIZONTAL_NZ


def average_linkage(D: np.ndarray, threshold: float) -> np.ndarray:
    """Agglomerative clustering with average linkage and a distance cutoff.

    Clusters keep merging while the smallest inter-cluster average distance is
    strictly below ``threshold``. Returns one integer label per row of ``D``,
    numbered by first appearance.
    """
    n = D.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)
    M = np.array(D, dtype=float, copy=True)
    np.fill_diagonal(M, np.inf)
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    owner = np.arange(n)

    for _ in range(n - 1):
        k = int(np.argmin(M))
        i, j = divmod(k, n)
        if not M[i, j] < threshold:
            break
        if j < i:
            i, j = j, i
        # Lance-Williams update for average linkage
        merged = (sizes[i] * M[i] + sizes[j] * M[j]) / (sizes[i] + sizes[j])
        M[i, :] = merged
        M[:, i] = merged
        M[i, i] = np.inf
        M[j, :] = np.inf
        M[:, j] = np.inf
        sizes[i] += sizes[j]
        active[j] = False
        owner[owner == j] = i

    _, labels = np.unique(owner, return_inverse=True)
    # renumber by first appearance
    first = {}
    out = np.empty(n, dtype=int)
    for idx, lab in enumerate(labels):
        out[idx] = first.setdefault(lab, len(first))
    return out


def representative_plane(planes: Sequence[Plane]) -> Plane:
    """Mean normal (renormalised) and median offset of the member planes."""
    N = np.array([p.normal for p in planes])
    n = N.mean(axis=0)
    n = n / np.linalg.norm(n)
    return Plane(tuple(n), float(np.median([p.d for p in planes])))


def collect_world_planes(panos: Sequence[PanoRecord]):
    refs, planes = [], []
    for pano in panos:
        for idx, local in enumerate(pano.planes):
            if not is_facade_candidate(local):
                continue
            refs.append(SegmentRef(pano.pano_id, idx))
            planes.append(transform_plane(local, pano.transform))
    return refs, planes


def cluster_planes(panos: Sequence[PanoRecord], threshold: float = DEFAULT_THRESHOLD) -> list[PlaneCluster]:
    """Cluster facade-candidate planes of all panoramas in the world frame.

    Cluster ids are assigned in order of each cluster's smallest
    :class:`SegmentRef`, so they do not depend on panorama order.
    """
    refs, planes = collect_world_planes(panos)
    if not refs:
        raise EmptyClusterSet("no facade-candidate planes in the selected panoramas")
    labels = average_linkage(pairwise_plane_distances(planes), threshold)

    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    ordered = sorted(groups.values(), key=lambda idxs: min(refs[i] for i in idxs))

    clusters = []
    for cid, idxs in enumerate(ordered):
        idxs = sorted(idxs, key=lambda i: refs[i])
        member_planes = [planes[i] for i in idxs]
        clusters.append(
            PlaneCluster(
                cluster_id=cid,
                members=[refs[i] for i in idxs],
                world_plane=representative_plane(member_planes),
                member_planes=member_planes,
            )
        )
    logger.info("clustered %d plane segments into %d facades", len(refs), len(clusters))
    return clusters


def cluster_report(clusters: Sequence[PlaneCluster]) -> dict:
    return {
        "clusters": [
            {
                "cluster_id": c.cluster_id,
                "members": [{"pano_id": m.pano_id, "plane_idx": m.plane_idx} for m in c.members],
                "member_planes": [p.to_list() for p in c.member_planes],
                "world_plane": c.world_plane.to_list(),
            }
            for c in clusters
        ]
    }


def clusters_from_report(doc: dict) -> list[PlaneCluster]:
    return [
        PlaneCluster(
            cluster_id=int(c["cluster_id"]),
            members=[SegmentRef(m["pano_id"], int(m["plane_idx"])) for m in c["members"]],
            world_plane=Plane(tuple(c["world_plane"][:3]), c["world_plane"][3]),
            member_planes=[Plane(tuple(p[:3]), p[3]) for p in c["member_planes"]],
        )
        for c in doc["clusters"]
    ]

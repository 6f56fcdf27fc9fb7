"""Vector, plane and pose math shared by every stage.

World frame is right-handed with z up. Panorama conventions:

* column ``x`` maps to azimuth ``theta = 2*pi*x/width - pi`` measured clockwise
  (seen from above) from the heading direction, so ``x = width/2`` looks along
  the heading and ``x = 3*width/4`` looks 90 degrees to the right;
* row ``y`` maps to elevation ``phi = pi/2 - pi*y/height`` (``y = 0`` is the
  zenith);
* heading 0 points along +y, heading 90 along +x;
* the camera rotation is heading about z, then pitch about the rotated x
  axis, then roll about the twice-rotated y axis.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BehindCamera, DegenerateRay, DegenerateTriangle, DomainError, ParallelRay

EPS = 1e-9
UP = np.array([0.0, 0.0, 1.0])


def _vec(p) -> np.ndarray:
    return np.asarray(p, dtype=float).reshape(3)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < EPS:
        raise DomainError("cannot normalize a zero vector")
    return v / n


@dataclass(frozen=True)
class Plane:
    """Plane ``normal . p = d`` with a unit normal.

    ``Plane.zero()`` is the one exception: a placeholder for the all-zero
    records that panorama depth data uses for "no plane".
    """

    normal: tuple[float, float, float]
    d: float

    def __post_init__(self):
        n = tuple(float(c) for c in self.normal)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "d", float(self.d))
        norm = math.sqrt(sum(c * c for c in n))
        if norm > EPS and abs(norm - 1.0) > 1e-9:
            raise DomainError(f"plane normal must be unit length, got |n| = {norm}")

    @classmethod
    def from_coeffs(cls, a, b, c, d) -> "Plane":
        """Build from raw ``[a, b, c, d]`` coefficients, normalizing them."""
        n = np.array([a, b, c], dtype=float)
        norm = float(np.linalg.norm(n))
        if norm < EPS:
            return cls.zero()
        return cls(tuple(n / norm), float(d) / norm)

    @classmethod
    def zero(cls) -> "Plane":
        return cls((0.0, 0.0, 0.0), 0.0)

    @property
    def is_zero(self) -> bool:
        return not any(self.normal)

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.n - self.d

    def to_list(self) -> list[float]:
        return [*self.normal, self.d]


@dataclass(frozen=True)
class PanoPose:
    position: tuple[float, float, float]
    heading: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        object.__setattr__(self, "heading", float(self.heading) % 360.0)
        if not -90.0 <= self.pitch <= 90.0:
            raise DomainError(f"pitch {self.pitch} outside [-90, 90]")
        if not -180.0 <= self.roll <= 180.0:
            raise DomainError(f"roll {self.roll} outside [-180, 180]")

    @property
    def pos(self) -> np.ndarray:
        return np.array(self.position)

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation."""
        return _rot_z(-math.radians(self.heading)) @ _rot_x(math.radians(self.pitch)) @ _rot_y(
            math.radians(self.roll)
        )


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=float)


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=float)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = _vec(self.translation)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DomainError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_pose(cls, pose: PanoPose) -> "RigidTransform":
        return cls(pose.rotation(), pose.pos)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True, eq=False)
class PlaneBasis:
    u: np.ndarray
    v: np.ndarray
    n: np.ndarray
    origin3d: np.ndarray

    def to_world(self, uv) -> np.ndarray:
        """Plane coordinates ``(..., 2)`` to world points ``(..., 3)``."""
        uv = np.asarray(uv, dtype=float)
        return self.origin3d + uv[..., :1] * self.u + uv[..., 1:2] * self.v

    def to_plane(self, points) -> np.ndarray:
        """World points ``(..., 3)`` to plane coordinates ``(..., 2)``."""
        rel = np.asarray(points, dtype=float) - self.origin3d
        return np.stack([rel @ self.u, rel @ self.v], axis=-1)

    def rotation_w2p(self) -> np.ndarray:
        return np.stack([self.u, self.v, self.n])


# -- panorama mapping -------------------------------------------------------

def pixels_to_dirs(xs, ys, width: int, height: int, pose: PanoPose) -> np.ndarray:
    """Vectorised :func:`pixel_to_dir` without bounds checking."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    theta = 2.0 * np.pi * xs / width - np.pi
    phi = np.pi / 2.0 - np.pi * ys / height
    cphi = np.cos(phi)
    local = np.stack([cphi * np.sin(theta), cphi * np.cos(theta), np.sin(phi)], axis=-1)
    return local @ pose.rotation().T


def pixel_to_dir(x: float, y: float, width: int, height: int, pose: PanoPose) -> np.ndarray:
    """World-frame unit direction of the ray through panorama pixel ``(x, y)``."""
    if not (0 <= x < width and 0 <= y < height):
        raise DomainError(f"pixel ({x}, {y}) outside {width}x{height} panorama")
    return pixels_to_dirs(x, y, width, height, pose)


def project_points_to_pano(points, pose: PanoPose, width: int, height: int):
    """Vectorised :func:`project_world_to_pano`.

    Returns ``(u, v, valid)``; ``valid`` is false where a point coincides with
    the camera centre.
    """
    rel = np.asarray(points, dtype=float) - pose.pos
    local = rel @ pose.rotation()
    r = np.linalg.norm(local, axis=-1)
    valid = r > EPS
    safe_r = np.where(valid, r, 1.0)
    horiz = np.hypot(local[..., 0], local[..., 1])
    theta = np.arctan2(local[..., 0], local[..., 1])
    phi = np.arcsin(np.clip(local[..., 2] / safe_r, -1.0, 1.0))
    u = (theta + np.pi) / (2.0 * np.pi) * width
    u = np.where(horiz <= 1e-12 * safe_r, width / 2.0, np.mod(u, width))
    v = (np.pi / 2.0 - phi) / np.pi * height
    return u, v, valid


def project_world_to_pano(p, pose: PanoPose, width: int, height: int) -> tuple[float, float]:
    u, v, valid = project_points_to_pano(_vec(p), pose, width, height)
    if not valid:
        raise DegenerateRay("point coincides with the camera centre")
    return float(u), float(v)


def ray_plane_intersect(origin, direction, plane: Plane) -> np.ndarray:
    o, dvec = _vec(origin), _vec(direction)
    n = plane.n
    denom = float(n @ dvec)
    if abs(denom) < EPS:
        raise ParallelRay("ray is parallel to the plane")
    t = (plane.d - float(n @ o)) / denom
    if t <= 0:
        raise BehindCamera(f"plane lies behind the ray origin (t = {t:g})")
    return o + t * dvec


def intersect_rays(origin, dirs, plane: Plane):
    """Vectorised ray-plane intersection from one origin.

    Returns ``(points, t)``; ``t`` is ``nan`` for parallel rays and rays that
    hit the plane behind the origin.
    """
    o = _vec(origin)
    denom = dirs @ plane.n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.d - float(plane.n @ o)) / denom
    t = np.where((np.abs(denom) < EPS) | ~(t > 0), np.nan, t)
    return o + t[..., None] * dirs, t


# -- planes -----------------------------------------------------------------

def transform_plane(local: Plane, t: RigidTransform) -> Plane:
    if local.is_zero:
        return local
    n_world = t.rotation @ local.n
    n_world = n_world / np.linalg.norm(n_world)
    return Plane(tuple(n_world), local.d + float(n_world @ t.translation))


def plane_basis(plane: Plane) -> PlaneBasis:
    """In-plane axes with ``v`` pointing up and ``u x v = n``.

    ``u = n x z`` (or +x projected into the plane for near-horizontal
    planes) and ``v = n x u``; when
    ``v`` would point down both axes are negated, which keeps the frame
    right-handed.
    """
    n = plane.n
    if plane.is_zero:
        raise DomainError("zero plane has no basis")
    if abs(n[2]) < 0.99:
        u = normalize(np.cross(n, UP))
    else:
        u = normalize(np.array([1.0, 0.0, 0.0]) - n[0] * n)
    v = np.cross(n, u)
    v = v / np.linalg.norm(v)
    if v[2] < 0:
        u, v = -u, -v
    return PlaneBasis(u=u, v=v, n=n, origin3d=n * plane.d)


def plane_from_points(points) -> Plane:
    """Least-squares plane through a point set."""
    P = np.asarray(points, dtype=float)
    c = P.mean(axis=0)
    _, _, vt = np.linalg.svd(P - c)
    n = vt[-1]
    return Plane(tuple(n / np.linalg.norm(n)), float(n @ c) / np.linalg.norm(n))


# -- metric scale -----------------------------------------------------------

class ScaleSpreadWarning(UserWarning):
    pass


def triangle_side_ratios(recon_positions: Sequence, measured_lengths: Sequence[float]) -> np.ndarray:
    """Measured over reconstructed length for each triangle side.

    Side ``i`` is the one opposite vertex ``i``.
    """
    P = np.asarray(recon_positions, dtype=float).reshape(3, 3)
    L = np.asarray(measured_lengths, dtype=float).reshape(3)
    if np.any(L <= 0):
        raise DomainError("measured lengths must be positive")
    recon = np.array([np.linalg.norm(P[(i + 1) % 3] - P[(i + 2) % 3]) for i in range(3)])
    if np.any(recon < EPS):
        raise DegenerateTriangle("reconstructed triangle has a zero-length side")
    return L / recon


def scale_spread(ratios) -> float:
    r = np.asarray(ratios, dtype=float)
    return float((r.max() - r.min()) / r.mean())


def estimate_scale_from_triangle(
    recon_positions: Sequence, measured_lengths: Sequence[float], spread_warn: float = 0.05
) -> float:
    """Metres per reconstruction unit from a tape-measured reference triangle.

    Returns the mean of the three per-side ratios. A :class:`ScaleSpreadWarning`
    is issued when the relative spread ``(max - min) / mean`` of the ratios
    exceeds ``spread_warn``.
    """
    ratios = triangle_side_ratios(recon_positions, measured_lengths)
    spread = scale_spread(ratios)
    if spread > spread_warn:
        warnings.warn(
            f"reference triangle side ratios disagree (relative spread {spread:.3f})",
            ScaleSpreadWarning,
            stacklevel=2,
        )
    return float(ratios.mean())

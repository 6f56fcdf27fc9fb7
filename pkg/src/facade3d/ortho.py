"""True-to-scale orthographic facade images.

An :class:`OrthoImage` is a pixel grid laid on a world plane. Pixel ``(x, y)``
covers plane coordinates ``grid_origin2d + [x, x+1) * pixel_size`` along the
basis ``u`` axis and ``[y, y+1) * pixel_size`` along ``v``; its colour is
sampled at the pixel centre. Because ``v`` points up, row 0 is the *bottom*
of the facade in memory. PNG files are written top-down (flipped) so they
display upright; the JSON sidecar carries the geometry.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np
from PIL import Image

from .clustering import PlaneCluster, SegmentRef
from .dataset import PanoRecord
from .errors import DegenerateExtent, DomainError, EmptySegment
from .geometry import (
    Plane,
    PlaneBasis,
    intersect_rays,
    plane_basis,
    pixels_to_dirs,
    project_points_to_pano,
)

logger = logging.getLogger(__name__)

DEFAULT_PIXEL_SIZE = 0.02
COPLANAR_TOL = 0.2
EXTENT_PERCENTILES = (2.0, 98.0)


@dataclass(eq=False)
class OrthoImage:
    pixels: np.ndarray  # (H, W, 4) uint8 RGBA
    pixel_size: float
    plane: Plane
    basis: PlaneBasis
    grid_origin2d: tuple[float, float]
    source_id: str = ""

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.pixels[..., 3]

    @property
    def foreground(self) -> np.ndarray:
        return self.pixels[..., 3] > 0

    def pixel_to_plane(self, x, y) -> np.ndarray:
        """Continuous pixel coordinates (corner convention) to plane ``(u, v)``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return np.stack(
            [self.grid_origin2d[0] + x * self.pixel_size, self.grid_origin2d[1] + y * self.pixel_size], axis=-1
        )

    def pixel_to_world(self, x, y) -> np.ndarray:
        return self.basis.to_world(self.pixel_to_plane(x, y))

    def world_to_pixel(self, points) -> np.ndarray:
        uv = self.basis.to_plane(points)
        return (uv - np.asarray(self.grid_origin2d)) / self.pixel_size

    def with_pixels(self, pixels, grid_origin2d=None, source_id=None) -> "OrthoImage":
        return replace(
            self,
            pixels=pixels,
            grid_origin2d=self.grid_origin2d if grid_origin2d is None else tuple(map(float, grid_origin2d)),
            source_id=self.source_id if source_id is None else source_id,
        )


class RayColorOracle(Protocol):
    """Anything that answers "what colour is seen along this ray".

    ``query`` returns RGBA values in 0..255. Implementations may add
    ``query_batch(origins, dirs, samples) -> (N, 4)`` for speed.
    """

    def query(self, origin, direction, samples: int): ...


class ConstantOracle:
    def __init__(self, rgba):
        self.rgba = np.asarray(rgba, dtype=float)

    def query(self, origin, direction, samples: int):
        return self.rgba.copy()

    def query_batch(self, origins, dirs, samples: int):
        return np.broadcast_to(self.rgba, (len(origins), 4)).copy()


# -- sampling ---------------------------------------------------------------

def sample_equirect(image: np.ndarray, u, v, mode: str = "bilinear") -> np.ndarray:
    """Sample an equirectangular image at continuous coordinates.

    Pixel ``(i, j)`` has its centre at ``(i + 0.5, j + 0.5)``. Columns wrap
    around; rows clamp.
    """
    h, w = image.shape[:2]
    img = image.astype(np.float32)
    if mode == "nearest":
        xi = np.mod(np.floor(u).astype(np.int64), w)
        yi = np.clip(np.floor(v).astype(np.int64), 0, h - 1)
        return img[yi, xi]
    if mode != "bilinear":
        raise DomainError(f"unknown sampling mode {mode!r}")
    fx = np.asarray(u, dtype=float) - 0.5
    fy = np.clip(np.asarray(v, dtype=float) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = (fx - x0)[..., None].astype(np.float32)
    wy = (fy - y0)[..., None].astype(np.float32)
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = np.mod(x0 + 1, w)
    x0 = np.mod(x0, w)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_plane_grid(
    pano: PanoRecord,
    basis: PlaneBasis,
    grid_origin2d,
    width: int,
    height: int,
    pixel_size: float,
    sampling: str = "bilinear",
    max_incidence_deg: float = 85.0,
) -> np.ndarray:
    """Colour every pixel centre of a plane grid from one panorama.

    A pixel is background (all zeros) when its reprojection is not a valid
    panorama coordinate: outside the image, at the camera centre, or seen at
    more than ``max_incidence_deg`` from the plane normal.
    """
    xs = (np.arange(width) + 0.5) * pixel_size + grid_origin2d[0]
    ys = (np.arange(height) + 0.5) * pixel_size + grid_origin2d[1]
    U, V = np.meshgrid(xs, ys)
    world = basis.origin3d + U[..., None] * basis.u + V[..., None] * basis.v
    pu, pv, valid = project_points_to_pano(world, pano.pose, pano.width, pano.height)
    ray = world - pano.pose.pos
    rn = np.linalg.norm(ray, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_inc = np.abs(ray @ basis.n) / rn
    valid &= cos_inc >= math.cos(math.radians(max_incidence_deg))
    valid &= (pu >= 0) & (pu < pano.width) & (pv >= 0) & (pv < pano.height)

    out = np.zeros((height, width, 4), dtype=np.uint8)
    if valid.any():
        rgb = sample_equirect(pano.image(), pu[valid], pv[valid], sampling)
        out[valid, :3] = np.clip(np.rint(rgb[..., :3]), 0, 255).astype(np.uint8)
        out[valid, 3] = 255
    return out


# -- panorama path ----------------------------------------------------------

def ortho_from_pano(
    pano: PanoRecord,
    plane: Plane,
    segment_points,
    pixel_size: float = DEFAULT_PIXEL_SIZE,
    *,
    extent: str = "percentile",
    margin: float = 0.0,
    sampling: str = "bilinear",
    max_incidence_deg: float = 85.0,
    source_id: str = "",
) -> OrthoImage:
    """Orthographic image of ``plane`` rendered from one panorama.

    The grid covers the extent of ``segment_points`` projected onto the plane
    (2nd-98th percentile by default, ``extent="minmax"`` for the raw range),
    grown by ``margin`` metres on every side.
    """
    if pixel_size <= 0:
        raise DomainError("pixel_size must be positive")
    P = np.asarray(segment_points, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise EmptySegment(f"no points for segment {source_id or '?'}")
    off = np.abs(plane.signed_distance(P))
    if off.max() >= COPLANAR_TOL:
        raise DomainError(f"segment points are {off.max():.3f} m off the plane (limit {COPLANAR_TOL} m)")

    basis = plane_basis(plane)
    P2 = basis.to_plane(P)
    if extent == "percentile":
        lo = np.percentile(P2, EXTENT_PERCENTILES[0], axis=0)
        hi = np.percentile(P2, EXTENT_PERCENTILES[1], axis=0)
    elif extent == "minmax":
        lo, hi = P2.min(axis=0), P2.max(axis=0)
    else:
        raise DomainError(f"unknown extent mode {extent!r}")
    lo = lo - margin
    hi = hi + margin
    width = int(round((hi[0] - lo[0]) / pixel_size))
    height = int(round((hi[1] - lo[1]) / pixel_size))
    if width < 2 or height < 2:
        raise DegenerateExtent(f"extent gives a {width}x{height} px image")

    pixels = sample_plane_grid(pano, basis, lo, width, height, pixel_size, sampling, max_incidence_deg)
    return OrthoImage(pixels, float(pixel_size), plane, basis, (float(lo[0]), float(lo[1])), source_id)


def segment_points(pano: PanoRecord, plane_idx: int, plane: Optional[Plane] = None) -> np.ndarray:
    """3-D points of one plane segment, one per associated matrix cell.

    Each association cell centre is mapped to its panorama pixel, turned into
    a ray and intersected with the segment's world plane.
    """
    if plane is None:
        plane = pano.world_plane(plane_idx)
    rows, cols = np.nonzero(pano.assoc.indices == plane_idx)
    if len(rows) == 0:
        return np.zeros((0, 3))
    xs = (cols + 0.5) * pano.width / pano.assoc.cols
    ys = (rows + 0.5) * pano.height / pano.assoc.rows
    dirs = pixels_to_dirs(xs, ys, pano.width, pano.height, pano.pose)
    pts, t = intersect_rays(pano.pose.pos, dirs, plane)
    return pts[np.isfinite(t)]


def ortho_per_segment(
    clusters: Sequence[PlaneCluster],
    panos,
    pixel_size: float = DEFAULT_PIXEL_SIZE,
    *,
    workers: int = 1,
    **ortho_kwargs,
) -> dict[SegmentRef, OrthoImage]:
    """One orthographic image per cluster member, keyed by segment.

    Segments without any associated points are skipped. Output order follows
    cluster order and member order regardless of ``workers``.
    """
    by_id = panos if isinstance(panos, Mapping) else {p.pano_id: p for p in panos}
    jobs = [ref for c in clusters for ref in c.members]

    def run(ref: SegmentRef):
        pano = by_id[ref.pano_id]
        plane = pano.world_plane(ref.plane_idx)
        pts = segment_points(pano, ref.plane_idx, plane)
        if len(pts) == 0:
            logger.info("segment %s has no points; skipped", ref.key())
            return None
        try:
            return ortho_from_pano(pano, plane, pts, pixel_size, source_id=ref.key(), **ortho_kwargs)
        except DegenerateExtent as exc:
            logger.info("segment %s skipped: %s", ref.key(), exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(ref) for ref in jobs]
    return {ref: img for ref, img in zip(jobs, results) if img is not None}


# -- volume path ------------------------------------------------------------

def ortho_from_volume(
    oracle: RayColorOracle,
    corners,
    pixel_size: float = DEFAULT_PIXEL_SIZE,
    samples_per_pixel: int = 1,
    source_id: str = "volume",
) -> OrthoImage:
    """Orthographic image from a ray-colour oracle and three facade corners.

    ``corners = (v0, v1, v2)`` with ``u = v1 - v0`` along the facade width and
    ``v = v2 - v0`` along its height. Pixel ``(x, y)`` is sampled at
    ``v0 + x*s*u_hat + y*s*v_hat`` with one ray along the outward normal
    ``u_hat x v_hat``.
    """
    if pixel_size <= 0:
        raise DomainError("pixel_size must be positive")
    v0, v1, v2 = (np.asarray(c, dtype=float).reshape(3) for c in corners)
    u, v = v1 - v0, v2 - v0
    lu, lv = np.linalg.norm(u), np.linalg.norm(v)
    if lu < 1e-9 or lv < 1e-9:
        raise DegenerateExtent("facade corners are degenerate")
    uh = u / lu
    angle = math.degrees(math.acos(np.clip(abs(uh @ (v / lv)), 0.0, 1.0)))
    if abs(90.0 - angle) > 2.0:
        raise DegenerateExtent(f"facade edges are {angle:.2f} deg apart, not orthogonal")
    vh = v - (v @ uh) * uh
    vh /= np.linalg.norm(vh)
    n = np.cross(uh, vh)

    width = int(round(lu / pixel_size))
    height = int(round(lv / pixel_size))
    if width < 1 or height < 1:
        raise DegenerateExtent(f"extent gives a {width}x{height} px image")

    xs, ys = np.meshgrid(np.arange(width) * pixel_size, np.arange(height) * pixel_size)
    origins = v0 + xs[..., None] * uh + ys[..., None] * vh
    flat = origins.reshape(-1, 3)
    dirs = np.broadcast_to(n, flat.shape)
    if hasattr(oracle, "query_batch"):
        rgba = np.asarray(oracle.query_batch(flat, dirs, samples_per_pixel), dtype=float)
    else:
        rgba = np.array([oracle.query(o, n, samples_per_pixel) for o in flat], dtype=float)
    pixels = np.clip(np.rint(rgba), 0, 255).astype(np.uint8).reshape(height, width, 4)

    d = float(n @ v0)
    plane = Plane(tuple(n), d)
    basis = PlaneBasis(u=uh, v=vh, n=n, origin3d=n * d)
    # sidecar convention: pixel centres sit half a pixel inside the grid origin
    o2 = basis.to_plane(v0) - 0.5 * pixel_size
    return OrthoImage(pixels, float(pixel_size), plane, basis, (float(o2[0]), float(o2[1])), source_id)


# -- persistence ------------------------------------------------------------

def ortho_sidecar(img: OrthoImage) -> dict:
    b = img.basis
    return {
        "width": img.width,
        "height": img.height,
        "pixel_size": img.pixel_size,
        "plane": img.plane.to_list(),
        "basis": {
            "u": b.u.tolist(),
            "v": b.v.tolist(),
            "n": b.n.tolist(),
            "origin3d": b.origin3d.tolist(),
        },
        "grid_origin2d": list(img.grid_origin2d),
        "source_id": img.source_id,
        "png_row_order": "top_down",
    }


def save_ortho(img: OrthoImage, png_path) -> Path:
    """Write ``<name>.png`` (RGBA, upright) and ``<name>.json`` sidecar."""
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img.pixels[::-1])).save(png_path)
    png_path.with_suffix(".json").write_text(json.dumps(ortho_sidecar(img), indent=2, sort_keys=True) + "\n")
    return png_path


def load_ortho(png_path) -> OrthoImage:
    png_path = Path(png_path)
    meta = json.loads(png_path.with_suffix(".json").read_text())
    with Image.open(png_path) as im:
        pixels = np.asarray(im.convert("RGBA"))[::-1].copy()
    b = meta["basis"]
    plane = Plane(tuple(meta["plane"][:3]), meta["plane"][3])
    basis = PlaneBasis(
        u=np.array(b["u"]), v=np.array(b["v"]), n=np.array(b["n"]), origin3d=np.array(b["origin3d"])
    )
    return OrthoImage(pixels, float(meta["pixel_size"]), plane, basis, tuple(meta["grid_origin2d"]), meta["source_id"])

"""Deterministic synthetic buildings and an analytic panorama renderer.

The renderer is the exact inverse of the orthographic projection: every
panorama pixel casts a ray, takes the nearest facade, ground or occluder hit
and paints it with flat colours. Facade walls carry a sparse pattern of
darker dots so that feature matching has something non-repetitive to lock
onto. Together with :func:`oracle_window_detector` this stands in for real
imagery and a trained window detector.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .dataset import ASSOC_COLS, ASSOC_ROWS, DatasetManifest, PanoRecord, PlaneAssocMatrix
from .errors import ConfigError, DegeneratePose
from .evaluation import GroundTruth, GTFacade
from .fusion import Detection
from .geometry import PanoPose, Plane, PlaneBasis, RigidTransform, pixels_to_dirs, plane_basis, transform_plane
from .ortho import OrthoImage

SKY = (135, 190, 235)
GROUND = (110, 105, 95)
WINDOW = (30, 60, 110)
# neighbouring walls differ clearly, as sunlit and shaded sides would
WALLS = (
    (205, 180, 150),
    (160, 165, 170),
    (190, 140, 110),
    (225, 220, 200),
    (170, 180, 140),
    (200, 160, 170),
)
DOT_SHADE = 0.78
WINDOW_CATEGORY = 1


@dataclass(frozen=True)
class Occluder:
    """Axis-aligned box painted in a flat colour."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[int, int, int] = (60, 110, 50)


@dataclass(eq=False)
class SynthFacade:
    facade_id: str
    plane: Plane
    basis: PlaneBasis
    extent: tuple[float, float, float, float]  # u0, v0, u1, v1 in basis coordinates
    wall_color: tuple[int, int, int]
    windows: list[tuple[float, float, float, float]]  # u, v (lower-left), w, h
    window_color: tuple[int, int, int] = WINDOW
    dots: Optional[np.ndarray] = None  # (rows, cols, 3): du, dv, radius; radius 0 = no dot
    dot_cell: float = 0.35

    @property
    def width(self) -> float:
        return self.extent[2] - self.extent[0]

    @property
    def height(self) -> float:
        return self.extent[3] - self.extent[1]

    def corners(self) -> np.ndarray:
        """World corners, counter-clockwise seen from outside, starting bottom-left."""
        u0, v0, u1, v1 = self.extent
        return self.basis.to_world(np.array([[u0, v0], [u1, v0], [u1, v1], [u0, v1]]))

    def window_corners(self, k: int) -> np.ndarray:
        u, v, w, h = self.windows[k]
        return self.basis.to_world(np.array([[u, v], [u + w, v], [u + w, v + h], [u, v + h]]))

    def wwr(self) -> float:
        return sum(w * h for _, _, w, h in self.windows) / (self.width * self.height)

    def paint(self, uv: np.ndarray) -> np.ndarray:
        """Colours of in-extent plane points ``(N, 2)``."""
        out = np.empty((len(uv), 3), dtype=np.float64)
        out[:] = self.wall_color
        if self.dots is not None:
            rows, cols = self.dots.shape[:2]
            cu = np.floor((uv[:, 0] - self.extent[0]) / self.dot_cell).astype(np.int64)
            cv = np.floor((uv[:, 1] - self.extent[1]) / self.dot_cell).astype(np.int64)
            ok = (cu >= 0) & (cu < cols) & (cv >= 0) & (cv < rows)
            dot = self.dots[np.clip(cv, 0, rows - 1), np.clip(cu, 0, cols - 1)]
            du = uv[:, 0] - (self.extent[0] + cu * self.dot_cell + dot[:, 0])
            dv = uv[:, 1] - (self.extent[1] + cv * self.dot_cell + dot[:, 1])
            hit = ok & (du * du + dv * dv < dot[:, 2] ** 2)
            out[hit] = np.asarray(self.wall_color) * DOT_SHADE
        for u, v, w, h in self.windows:
            m = (uv[:, 0] >= u) & (uv[:, 0] < u + w) & (uv[:, 1] >= v) & (uv[:, 1] < v + h)
            out[m] = self.window_color
        return out


@dataclass(eq=False)
class SynthBuilding:
    building_id: str
    facades: list[SynthFacade]
    footprint: list[tuple[float, float, float]]
    height: float
    occluders: list[Occluder] = field(default_factory=list)
    sky_color: tuple[int, int, int] = SKY
    ground_color: tuple[int, int, int] = GROUND

    def palette(self) -> list[tuple[int, int, int]]:
        """Every non-window colour that can appear in a rendering."""
        cols = [self.sky_color, self.ground_color]
        for f in self.facades:
            cols.append(f.wall_color)
            cols.append(tuple(int(round(c * DOT_SHADE)) for c in f.wall_color))
        cols.extend(o.color for o in self.occluders)
        return cols

    def contains(self, p) -> bool:
        """Whether a point lies inside the building volume."""
        x, y, z = (float(c) for c in p)
        if not 0.0 <= z <= self.height:
            return False
        return all(float(f.plane.signed_distance([x, y, z])) < 0 for f in self.facades) and len(self.facades) > 2


@dataclass
class SynthConfig:
    seed: int = 0
    n_facades: int = 4  # 4 = rectangular block, 1 = free-standing wall
    facade_width_range: tuple[float, float] = (10.0, 18.0)
    facade_height_range: tuple[float, float] = (8.0, 12.0)
    facade_size: Optional[tuple[float, float]] = None  # explicit (width, height) for every facade
    window_grid: Optional[tuple[int, int]] = None  # explicit (rows, cols)
    window_size: Optional[tuple[float, float]] = None  # explicit (width, height)
    window_width_range: tuple[float, float] = (1.0, 1.5)
    window_height_range: tuple[float, float] = (1.2, 1.6)
    floor_height: float = 3.0
    bay_width: float = 2.8
    wwr_range: tuple[float, float] = (0.15, 0.35)
    ring_count: int = 8
    ring_offset: float = 8.0  # metres beyond the footprint's circumscribed circle
    camera_height: float = 2.5
    pano_width: int = 2048
    pano_height: int = 1024
    noise_sigma: float = 0.0
    texture: bool = True
    capture_date: str = "2023-06-01"
    occluders: list[Occluder] = field(default_factory=list)

    def validate(self) -> None:
        if self.n_facades not in (1, 4):
            raise ConfigError("n_facades must be 1 or 4")
        if self.pano_width < ASSOC_COLS or self.pano_height < ASSOC_ROWS:
            raise ConfigError("panorama resolution must be at least 512x256")
        lo, hi = self.facade_width_range
        if not 0 < lo <= hi:
            raise ConfigError("facade_width_range must be positive and ordered")
        lo, hi = self.facade_height_range
        if not 0 < lo <= hi:
            raise ConfigError("facade_height_range must be positive and ordered")
        if self.ring_count < 1:
            raise ConfigError("ring_count must be positive")
        if self.window_size is not None and min(self.window_size) <= 0:
            raise ConfigError("window_size must be positive")


# -- generation -------------------------------------------------------------

def _window_layout(width, height, cfg: SynthConfig, rng) -> list[tuple[float, float, float, float]]:
    if cfg.window_grid is not None:
        rows, cols = cfg.window_grid
    else:
        rows = max(1, int(height // cfg.floor_height))
        cols = max(1, int(width // cfg.bay_width))
    if rows < 1 or cols < 1:
        raise ConfigError("window grid must have at least one row and column")
    bay, storey = width / cols, height / rows

    for _ in range(200):
        if cfg.window_size is not None:
            ww, wh = cfg.window_size
        else:
            ww = rng.uniform(*cfg.window_width_range)
            wh = rng.uniform(*cfg.window_height_range)
        if ww >= bay or wh >= storey:
            if cfg.window_size is not None:
                raise ConfigError(f"window {ww}x{wh} m does not fit a {bay:.2f}x{storey:.2f} m bay")
            continue
        wwr = rows * cols * ww * wh / (width * height)
        if cfg.window_size is None and not cfg.wwr_range[0] <= wwr <= cfg.wwr_range[1]:
            continue
        break
    else:
        raise ConfigError("could not find a window layout inside the requested WWR range")

    sill = min(0.9, (storey - wh) / 2)
    out = []
    for r in range(rows):
        for c in range(cols):
            u = (c + 0.5) * bay - ww / 2
            v = r * storey + sill
            out.append((u, v, ww, wh))
    return out


def _dots(width, height, cell, rng) -> np.ndarray:
    rows = int(math.ceil(height / cell))
    cols = int(math.ceil(width / cell))
    radius = rng.uniform(0.05, 0.09, size=(rows, cols))
    radius[rng.random((rows, cols)) > 0.7] = 0.0
    du = radius + rng.random((rows, cols)) * (cell - 2 * radius)
    dv = radius + rng.random((rows, cols)) * (cell - 2 * radius)
    return np.stack([du, dv, radius], axis=-1)


def generate_building(cfg: SynthConfig) -> tuple[SynthBuilding, GroundTruth]:
    """Building geometry plus exact ground truth, deterministic per seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if cfg.facade_size is not None:
        length = depth = float(cfg.facade_size[0])
        height = float(cfg.facade_size[1])
    else:
        length = float(rng.uniform(*cfg.facade_width_range))
        depth = float(rng.uniform(*cfg.facade_width_range))
        height = float(rng.uniform(*cfg.facade_height_range))

    if cfg.n_facades == 4:
        hx, hy = length / 2, depth / 2
        corners2d = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
        edges = [(corners2d[i], corners2d[(i + 1) % 4]) for i in range(4)]
    else:
        edges = [((-length / 2, 0.0), (length / 2, 0.0))]
        corners2d = [edges[0][0], edges[0][1]]

    facades = []
    for i, (a, b) in enumerate(edges):
        a, b = np.array(a), np.array(b)
        edge = b - a
        w = float(np.linalg.norm(edge))
        n = np.array([edge[1], -edge[0], 0.0]) / w
        plane = Plane(tuple(n), float(n[:2] @ a))
        basis = plane_basis(plane)
        pa = basis.to_plane(np.array([a[0], a[1], 0.0]))
        pb = basis.to_plane(np.array([b[0], b[1], 0.0]))
        u0 = float(min(pa[0], pb[0]))
        # snap tiny float noise so the bottom edge sits exactly on the ground
        extent = (u0, 0.0, u0 + w, height)
        wins = [(u0 + u, v, ww, wh) for (u, v, ww, wh) in _window_layout(w, height, cfg, rng)]
        facades.append(
            SynthFacade(
                facade_id=f"f{i}",
                plane=plane,
                basis=basis,
                extent=extent,
                wall_color=WALLS[i % len(WALLS)],
                windows=wins,
                dots=_dots(w, height, 0.35, rng) if cfg.texture else None,
            )
        )

    building = SynthBuilding(
        building_id=f"synth-{cfg.seed}",
        facades=facades,
        footprint=[(float(x), float(y), 0.0) for x, y in corners2d],
        height=height,
        occluders=list(cfg.occluders),
    )
    return building, ground_truth_of(building)


def ground_truth_of(building: SynthBuilding) -> GroundTruth:
    gts = []
    for f in building.facades:
        gts.append(
            GTFacade(
                facade_id=f.facade_id,
                plane=f.plane,
                corners=tuple(tuple(map(float, c)) for c in f.corners()),
                width_m=f.width,
                height_m=f.height,
                windows=[tuple(tuple(map(float, c)) for c in f.window_corners(k)) for k in range(len(f.windows))],
                wwr=f.wwr(),
            )
        )
    return GroundTruth(building_id=building.building_id, facades=gts, footprint=list(building.footprint))


# -- ray casting ------------------------------------------------------------

SKY_ID = -1
GROUND_ID = -2


def cast_rays(building: SynthBuilding, origins, dirs):
    """Nearest hit for each ray.

    Returns ``(hit, t)`` where ``hit`` is a facade index, ``GROUND_ID``,
    ``SKY_ID`` or ``-(3 + k)`` for occluder ``k``.
    """
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
    n = len(dirs)
    best = np.full(n, np.inf)
    hit = np.full(n, SKY_ID, dtype=np.int64)
    for i, f in enumerate(building.facades):
        nv = f.plane.n
        denom = dirs @ nv
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (f.plane.d - origins @ nv) / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (t < best)
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        P = origins[idx] + t[idx, None] * dirs[idx]
        uv = f.basis.to_plane(P)
        u0, v0, u1, v1 = f.extent
        inside = (uv[:, 0] >= u0) & (uv[:, 0] <= u1) & (uv[:, 1] >= v0) & (uv[:, 1] <= v1)
        idx = idx[inside]
        best[idx] = t[idx]
        hit[idx] = i
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origins[:, 2] / dirs[:, 2]
    ok = (dirs[:, 2] < -1e-12) & (tg > 1e-9) & (tg < best)
    best[ok] = tg[ok]
    hit[ok] = GROUND_ID
    for k, occ in enumerate(building.occluders):
        lo, hi = np.asarray(occ.lo), np.asarray(occ.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tmax >= tmin) & (tmin > 1e-9) & (tmin < best)
        best[ok] = tmin[ok]
        hit[ok] = -(3 + k)
    return hit, best


def shade(building: SynthBuilding, origins, dirs, hit, t) -> np.ndarray:
    origins = np.broadcast_to(np.asarray(origins, dtype=float), np.shape(dirs))
    out = np.empty((len(dirs), 3))
    out[:] = building.sky_color
    out[hit == GROUND_ID] = building.ground_color
    for k, occ in enumerate(building.occluders):
        out[hit == -(3 + k)] = occ.color
    for i, f in enumerate(building.facades):
        idx = np.nonzero(hit == i)[0]
        if len(idx):
            P = origins[idx] + t[idx, None] * dirs[idx]
            out[idx] = f.paint(f.basis.to_plane(P))
    return out


def _inside_footprint(building: SynthBuilding, p) -> bool:
    if len(building.facades) < 3:
        return False
    return building.contains(p)


def render_panorama(
    building: SynthBuilding,
    pose: PanoPose,
    width: int,
    height: int,
    *,
    pano_id: str = "pano",
    capture_date: str | dt.date = "2023-06-01",
    noise_sigma: float = 0.0,
    seed: int = 0,
    chunk_rows: int = 128,
) -> PanoRecord:
    """Render an equirectangular panorama with planes and association matrix.

    Planes are exported in the panorama-local frame (the inverse of the
    pose transform): every facade that owns at least one association cell,
    followed by the ground plane.
    """
    if _inside_footprint(building, pose.position):
        raise DegeneratePose(f"pose {pose.position} lies inside the building")
    o = pose.pos
    img = np.empty((height, width, 3), dtype=np.uint8)
    noise_rng = np.random.default_rng(seed)
    xs = np.arange(width) + 0.5
    for r0 in range(0, height, chunk_rows):
        rows = np.arange(r0, min(r0 + chunk_rows, height)) + 0.5
        X, Y = np.meshgrid(xs, rows)
        dirs = pixels_to_dirs(X.ravel(), Y.ravel(), width, height, pose)
        hit, t = cast_rays(building, o, dirs)
        rgb = shade(building, o, dirs, hit, t)
        if noise_sigma > 0:
            rgb = rgb + noise_rng.normal(0.0, noise_sigma, rgb.shape)
        img[r0 : r0 + len(rows)] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8).reshape(len(rows), width, 3)

    # association matrix from cell centres
    cx = (np.arange(ASSOC_COLS) + 0.5) * width / ASSOC_COLS
    cy = (np.arange(ASSOC_ROWS) + 0.5) * height / ASSOC_ROWS
    X, Y = np.meshgrid(cx, cy)
    cell_hit, _ = cast_rays(building, o, pixels_to_dirs(X.ravel(), Y.ravel(), width, height, pose))
    cell_hit = cell_hit.reshape(ASSOC_ROWS, ASSOC_COLS)

    to_local = RigidTransform.from_pose(pose).inverse()
    planes, assoc = [], np.full(cell_hit.shape, -1, dtype=np.int64)
    for i, f in enumerate(building.facades):
        m = cell_hit == i
        if m.any():
            assoc[m] = len(planes)
            planes.append(transform_plane(f.plane, to_local))
    m = cell_hit == GROUND_ID
    if m.any():
        assoc[m] = len(planes)
        planes.append(transform_plane(Plane((0.0, 0.0, 1.0), 0.0), to_local))

    if isinstance(capture_date, str):
        capture_date = dt.date.fromisoformat(capture_date)
    return PanoRecord(
        pano_id=pano_id,
        width=width,
        height=height,
        pose=pose,
        capture_date=capture_date,
        planes=planes,
        assoc=PlaneAssocMatrix(assoc),
        pixels=img,
    )


def ring_poses(building: SynthBuilding, cfg: SynthConfig) -> list[PanoPose]:
    """Camera poses on a circle around the footprint, each facing the centre."""
    pts = np.array(building.footprint)[:, :2]
    c = pts.mean(axis=0)
    radius = float(np.max(np.linalg.norm(pts - c, axis=1))) + cfg.ring_offset
    poses = []
    for k in range(cfg.ring_count):
        a = 2 * math.pi * (k + 0.5) / cfg.ring_count - math.pi / 2
        pos = c + radius * np.array([math.cos(a), math.sin(a)])
        to_c = c - pos
        heading = math.degrees(math.atan2(to_c[0], to_c[1])) % 360.0
        poses.append(PanoPose((float(pos[0]), float(pos[1]), cfg.camera_height), heading=heading))
    return poses


def generate_dataset(cfg: SynthConfig, poses: Optional[Sequence[PanoPose]] = None):
    """Building, ground truth and a rendered panorama ring as a manifest."""
    building, gt = generate_building(cfg)
    if poses is None:
        poses = ring_poses(building, cfg)
    panos = []
    for k, pose in enumerate(poses):
        panos.append(
            render_panorama(
                building,
                pose,
                cfg.pano_width,
                cfg.pano_height,
                pano_id=f"p{k:02d}",
                capture_date=cfg.capture_date,
                noise_sigma=cfg.noise_sigma,
                seed=cfg.seed * 1000 + k,
            )
        )
    n = len(panos)
    for k, p in enumerate(panos):
        if n > 1:
            p.neighbor_ids = sorted({panos[(k - 1) % n].pano_id, panos[(k + 1) % n].pano_id} - {p.pano_id})
    manifest = DatasetManifest(
        dataset_id=building.building_id,
        panos=panos,
        frame_origin="synthetic local frame: building footprint centred at the origin, z up, metres",
        footprint=list(building.footprint),
    )
    return manifest, building, gt


# -- volume oracle ----------------------------------------------------------

class SceneRayOracle:
    """Analytic ray-colour oracle over a synthetic building.

    A query ray starts on the facade and points outwards; the oracle looks
    back along it from ``standoff`` metres out, the way an orthographic
    camera in front of the facade would.
    """

    def __init__(self, building: SynthBuilding, standoff: float = 0.5):
        self.building = building
        self.standoff = standoff

    def query_batch(self, origins, dirs, samples: int = 1) -> np.ndarray:
        origins = np.asarray(origins, dtype=float)
        dirs = np.asarray(dirs, dtype=float)
        start = origins + self.standoff * dirs
        back = -dirs
        hit, t = cast_rays(self.building, start, back)
        rgb = shade(self.building, start, back, hit, t)
        rgb[start[:, 2] < 0] = self.building.ground_color  # below grade
        return np.concatenate([rgb, np.full((len(rgb), 1), 255.0)], axis=1)

    def query(self, origin, direction, samples: int = 1) -> np.ndarray:
        return self.query_batch(np.asarray(origin, float)[None], np.asarray(direction, float)[None], samples)[0]


def render_facade_ortho(
    building: SynthBuilding,
    facade_index: int,
    pixel_size: float,
    margin: float = 0.0,
    shift: tuple[float, float] = (0.0, 0.0),
    source_id: str = "",
) -> OrthoImage:
    """Analytic orthographic image of one facade, optionally with a margin.

    ``shift`` moves the grid (in metres, plane coordinates) to emulate views
    that are offset against each other.
    """
    from .ortho import ortho_from_volume

    f = building.facades[facade_index]
    u0, v0, u1, v1 = f.extent
    u0, v0 = u0 - margin + shift[0], v0 - margin + shift[1]
    u1, v1 = u1 + margin + shift[0], v1 + margin + shift[1]
    corners = f.basis.to_world(np.array([[u0, v0], [u1, v0], [u0, v1]]))
    return ortho_from_volume(SceneRayOracle(building), corners, pixel_size, 1, source_id or f.facade_id)


# -- oracle detector --------------------------------------------------------

def oracle_window_detector(
    img: OrthoImage,
    window_color=WINDOW,
    tol: float = 48.0,
    palette: Optional[Sequence] = None,
    min_area: int = 1,
) -> list[Detection]:
    """Bounding boxes of 4-connected window-coloured regions.

    A foreground pixel is window-coloured when it is within ``tol`` of
    ``window_color``, or, if ``palette`` (the other scene colours) is given,
    when ``window_color`` is its nearest colour. Boxes are in pixel corner
    coordinates of ``img``.
    """
    rgb = img.pixels[..., :3].astype(float)
    d_win = np.linalg.norm(rgb - np.asarray(window_color, float), axis=-1)
    if palette:
        d_other = np.min(
            np.stack([np.linalg.norm(rgb - np.asarray(c, float), axis=-1) for c in palette]), axis=0
        )
        mask = d_win < d_other
    else:
        mask = d_win < tol
    mask &= img.foreground
    labels, count = ndimage.label(mask)  # default structure = 4-connectivity
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        area = int(np.count_nonzero(labels[sl] == k))
        if area < min_area:
            continue
        ys, xs = sl
        dets.append(
            Detection(
                bbox=(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop)),
                score=1.0,
                category_id=WINDOW_CATEGORY,
                source_id=img.source_id,
            )
        )
    return dets

"""3-D window geometry, window-to-wall ratio and the thermal model JSON."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateFacade, InvariantViolation, OutOfFacade
from .fusion import Detection
from .geometry import Plane, PlaneBasis

Point = tuple[float, float, float]
SCHEMA_VERSION = "1.0"


def _pt(p) -> Point:
    return tuple(float(c) for c in p)


@dataclass(frozen=True)
class WindowGeometry3D:
    corners: tuple[Point, Point, Point, Point]  # counter-clockwise seen from the normal side
    width_m: float
    height_m: float
    area_m2: float
    bbox_px: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    score: float = 1.0


@dataclass(frozen=True)
class FacadeModel:
    facade_id: str
    plane: Plane
    basis: tuple[Point, Point, Point, Point]  # u, v, n, origin3d
    bbox_px: tuple[float, float, float, float]  # facade box in the aligned reference grid
    grid_origin2d: tuple[float, float]  # plane coordinates of the facade image's pixel (0, 0) corner
    center3d: Point
    width_m: float
    height_m: float
    pixel_size: float
    windows: tuple[WindowGeometry3D, ...] = ()
    wwr: float = 0.0

    def plane_basis(self) -> PlaneBasis:
        u, v, n, o = (np.array(c) for c in self.basis)
        return PlaneBasis(u=u, v=v, n=n, origin3d=o)

    def boundary(self) -> tuple[Point, Point, Point, Point]:
        b = self.plane_basis()
        ou, ov = self.grid_origin2d
        uv = np.array([[ou, ov], [ou + self.width_m, ov], [ou + self.width_m, ov + self.height_m], [ou, ov + self.height_m]])
        return tuple(_pt(p) for p in b.to_world(uv))

    @property
    def area_m2(self) -> float:
        return self.width_m * self.height_m


@dataclass(frozen=True)
class ThermalModel:
    building_id: str
    facades: tuple[FacadeModel, ...]
    footprint: Optional[tuple[Point, ...]] = None
    frame_note: str = ""
    source: str = "streetview"
    properties: dict = field(default_factory=dict, compare=True, hash=False)


def make_facade(
    facade_id: str,
    plane: Plane,
    basis: PlaneBasis,
    bbox_px,
    grid_origin2d,
    width_px: int,
    height_px: int,
    pixel_size: float,
) -> FacadeModel:
    """Facade model without windows; ``grid_origin2d`` is the facade crop's origin."""
    if pixel_size <= 0:
        raise DegenerateFacade("pixel_size must be positive")
    w, h = width_px * pixel_size, height_px * pixel_size
    centre = basis.to_world(np.array([grid_origin2d[0] + w / 2, grid_origin2d[1] + h / 2]))
    return FacadeModel(
        facade_id=facade_id,
        plane=plane,
        basis=(_pt(basis.u), _pt(basis.v), _pt(basis.n), _pt(basis.origin3d)),
        bbox_px=tuple(float(c) for c in bbox_px),
        grid_origin2d=(float(grid_origin2d[0]), float(grid_origin2d[1])),
        center3d=_pt(centre),
        width_m=float(w),
        height_m=float(h),
        pixel_size=float(pixel_size),
    )


def bbox_to_world(det: Detection, facade: FacadeModel, tol: float = 1e-6) -> WindowGeometry3D:
    """Window rectangle in world coordinates from a box in facade-image pixels."""
    x0, y0, x1, y1 = det.bbox
    s = facade.pixel_size
    wpx, hpx = facade.width_m / s, facade.height_m / s
    if x0 < -tol or y0 < -tol or x1 > wpx + tol or y1 > hpx + tol:
        raise OutOfFacade(f"box {det.bbox} outside the {wpx:.1f}x{hpx:.1f} px facade")
    ou, ov = facade.grid_origin2d
    uv = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]) * s + np.array([ou, ov])
    corners = facade.plane_basis().to_world(uv)
    w, h = (x1 - x0) * s, (y1 - y0) * s
    return WindowGeometry3D(
        corners=tuple(_pt(c) for c in corners),
        width_m=float(w),
        height_m=float(h),
        area_m2=float(w * h),
        bbox_px=(float(x0), float(y0), float(x1), float(y1)),
        score=float(det.score),
    )


def union_area(rects) -> float:
    """Exact area of a union of axis-aligned rectangles ``(x0, y0, x1, y1)``.

    Sweeps the x axis over compressed coordinates and merges the y intervals
    active in each slab.
    """
    rects = [tuple(map(float, r)) for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0.0
    xs = sorted({r[0] for r in rects} | {r[2] for r in rects})
    total = 0.0
    for xa, xb in zip(xs[:-1], xs[1:]):
        spans = sorted((r[1], r[3]) for r in rects if r[0] <= xa and r[2] >= xb)
        covered, cur_lo, cur_hi = 0.0, None, None
        for lo, hi in spans:
            if cur_hi is None or lo > cur_hi:
                if cur_hi is not None:
                    covered += cur_hi - cur_lo
                cur_lo, cur_hi = lo, hi
            else:
                cur_hi = max(cur_hi, hi)
        if cur_hi is not None:
            covered += cur_hi - cur_lo
        total += covered * (xb - xa)
    return total


def window_rects_2d(facade: FacadeModel, windows: Sequence[WindowGeometry3D] | None = None) -> list:
    b = facade.plane_basis()
    out = []
    for w in facade.windows if windows is None else windows:
        uv = b.to_plane(np.array(w.corners))
        out.append((uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max()))
    return out


def compute_wwr(facade: FacadeModel, windows: Sequence[WindowGeometry3D] | None = None) -> float:
    """Union of window areas over facade area (overlaps counted once)."""
    area = facade.width_m * facade.height_m
    if not area > 0:
        raise DegenerateFacade(f"facade {facade.facade_id} has zero area")
    return union_area(window_rects_2d(facade, windows)) / area


def with_windows(facade: FacadeModel, windows: Sequence[WindowGeometry3D]) -> FacadeModel:
    from dataclasses import replace

    windows = tuple(windows)
    return replace(facade, windows=windows, wwr=float(compute_wwr(facade, windows)))


# -- serialization ----------------------------------------------------------

def _facade_to_dict(f: FacadeModel) -> dict:
    u, v, n, o = f.basis
    return {
        "type": "Face",
        "identifier": f.facade_id,
        "face_type": "Wall",
        "geometry": {
            "type": "Face3D",
            "boundary": [list(p) for p in f.boundary()],
            "plane": {"n": list(f.plane.normal), "d": f.plane.d},
        },
        "ortho": {
            "basis": {"u": list(u), "v": list(v), "n": list(n), "origin3d": list(o)},
            "bbox_px": list(f.bbox_px),
            "grid_origin2d": list(f.grid_origin2d),
            "pixel_size": f.pixel_size,
            "width_m": f.width_m,
            "height_m": f.height_m,
            "center": list(f.center3d),
        },
        "wwr": f.wwr,
        "apertures": [
            {
                "type": "Aperture",
                "identifier": f"{f.facade_id}_w{k}",
                "geometry": {"type": "Face3D", "boundary": [list(p) for p in w.corners]},
                "width_m": w.width_m,
                "height_m": w.height_m,
                "area_m2": w.area_m2,
                "bbox_px": list(w.bbox_px),
                "score": w.score,
            }
            for k, w in enumerate(f.windows)
        ],
    }


def _facade_from_dict(d: dict) -> FacadeModel:
    o = d["ortho"]
    b = o["basis"]
    return FacadeModel(
        facade_id=d["identifier"],
        plane=Plane(tuple(d["geometry"]["plane"]["n"]), d["geometry"]["plane"]["d"]),
        basis=(_pt(b["u"]), _pt(b["v"]), _pt(b["n"]), _pt(b["origin3d"])),
        bbox_px=tuple(o["bbox_px"]),
        grid_origin2d=tuple(o["grid_origin2d"]),
        center3d=_pt(o["center"]),
        width_m=o["width_m"],
        height_m=o["height_m"],
        pixel_size=o["pixel_size"],
        windows=tuple(
            WindowGeometry3D(
                corners=tuple(_pt(p) for p in a["geometry"]["boundary"]),
                width_m=a["width_m"],
                height_m=a["height_m"],
                area_m2=a["area_m2"],
                bbox_px=tuple(a["bbox_px"]),
                score=a["score"],
            )
            for a in d["apertures"]
        ),
        wwr=d["wwr"],
    )


def assemble_model(
    facades: Sequence[FacadeModel],
    footprint=None,
    building_id: str = "building",
    frame_note: str = "",
    source: str = "streetview",
    properties: Optional[dict] = None,
) -> ThermalModel:
    if not facades:
        raise InvariantViolation("a thermal model needs at least one facade")
    ids = [f.facade_id for f in facades]
    if len(set(ids)) != len(ids):
        raise InvariantViolation("duplicate facade ids", "faces")
    for f in facades:
        if not 0.0 <= f.wwr <= 1.0 + 1e-12:
            raise InvariantViolation(f"wwr {f.wwr} outside [0, 1]", f"faces[{f.facade_id}]")
    return ThermalModel(
        building_id=building_id,
        facades=tuple(facades),
        footprint=tuple(_pt(p) for p in footprint) if footprint else None,
        frame_note=frame_note,
        source=source,
        properties=dict(properties or {}),
    )


def model_to_dict(m: ThermalModel) -> dict:
    return {
        "type": "Model",
        "schema_version": SCHEMA_VERSION,
        "identifier": m.building_id,
        "units": "Meters",
        "frame_note": m.frame_note,
        "source": m.source,
        "footprint": [list(p) for p in m.footprint] if m.footprint else None,
        "faces": [_facade_to_dict(f) for f in m.facades],
        "properties": m.properties,
    }


def model_from_dict(d: dict) -> ThermalModel:
    fp = d.get("footprint")
    return ThermalModel(
        building_id=d["identifier"],
        facades=tuple(_facade_from_dict(f) for f in d["faces"]),
        footprint=tuple(_pt(p) for p in fp) if fp else None,
        frame_note=d.get("frame_note", ""),
        source=d.get("source", "streetview"),
        properties=d.get("properties", {}),
    )


def dumps_model(m: ThermalModel) -> str:
    return json.dumps(model_to_dict(m), indent=2, sort_keys=True) + "\n"


def loads_model(text: str) -> ThermalModel:
    return model_from_dict(json.loads(text))


def save_model(m: ThermalModel, path) -> Path:
    path = Path(path)
    path.write_text(dumps_model(m))
    return path


def load_model(path) -> ThermalModel:
    return loads_model(Path(path).read_text())

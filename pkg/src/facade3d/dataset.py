"""Panorama dataset on disk: ``dataset.json`` manifest, images, association PNGs.

The manifest replaces live street-view API access. All paths in it are
relative to the manifest's directory. See ``docs/formats.md`` for the
field-by-field schema.
"""
from __future__ import annotations

import datetime as dt
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DomainError, EmptySelection, InvariantViolation, ManifestParseError, MissingFileError
from .geometry import PanoPose, Plane, RigidTransform

logger = logging.getLogger(__name__)

ASSOC_ROWS = 256
ASSOC_COLS = 512


@dataclass(frozen=True, eq=False)
class PlaneAssocMatrix:
    """Low-resolution plane index grid aligned with the panorama; -1 = no plane."""

    indices: np.ndarray

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def cols(self) -> int:
        return self.indices.shape[1]


@dataclass(eq=False)
class PanoRecord:
    pano_id: str
    width: int
    height: int
    pose: PanoPose
    capture_date: dt.date
    planes: list[Plane]
    assoc: PlaneAssocMatrix
    neighbor_ids: list[str] = field(default_factory=list)
    transform: Optional[RigidTransform] = None
    image_path: Optional[str] = None
    pixels: Optional[np.ndarray] = None  # in-memory image, takes precedence over image_path

    def __post_init__(self):
        if self.transform is None:
            self.transform = RigidTransform.from_pose(self.pose)

    def image(self) -> np.ndarray:
        """RGB uint8 pixels, ``(height, width, 3)``."""
        if self.pixels is not None:
            return self.pixels
        if self.image_path is None:
            raise MissingFileError(f"pano {self.pano_id} has no image")
        return _load_rgb(self.image_path)

    def world_plane(self, idx: int) -> Plane:
        from .geometry import transform_plane

        return transform_plane(self.planes[idx], self.transform)


@dataclass(eq=False)
class DatasetManifest:
    dataset_id: str
    panos: list[PanoRecord]
    frame_origin: str = ""
    footprint: Optional[list[tuple[float, float, float]]] = None
    root: Optional[str] = None

    def by_id(self) -> dict[str, PanoRecord]:
        return {p.pano_id: p for p in self.panos}


@lru_cache(maxsize=64)
def _load_rgb(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    arr.setflags(write=False)
    return arr


def read_assoc_png(path) -> np.ndarray:
    """Decode a 16-bit association PNG (0 = none, k+1 = plane k)."""
    with Image.open(path) as im:
        raw = np.asarray(im).astype(np.int32)
    return raw - 1


def write_assoc_png(path, indices: np.ndarray) -> None:
    arr = np.asarray(indices, dtype=np.int64) + 1
    if arr.min() < 0 or arr.max() > 65535:
        raise DomainError("association indices do not fit a 16-bit PNG")
    Image.fromarray(arr.astype(np.uint16)).save(path)


# -- loading ----------------------------------------------------------------

def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise InvariantViolation(f"missing field '{key}'", path)
    return obj[key]


def _parse_pano(raw, root: Path, path: str, assoc_shape) -> PanoRecord:
    pano_id = str(_require(raw, "pano_id", path))
    width = int(_require(raw, "width", path))
    height = int(_require(raw, "height", path))
    if width <= 0 or height <= 0:
        raise InvariantViolation("width/height must be positive", path)

    pose_raw = _require(raw, "pose", path)
    try:
        pose = PanoPose(
            position=tuple(_require(pose_raw, "position", f"{path}.pose")),
            heading=float(pose_raw.get("heading", 0.0)),
            pitch=float(pose_raw.get("pitch", 0.0)),
            roll=float(pose_raw.get("roll", 0.0)),
        )
    except DomainError as exc:
        raise InvariantViolation(str(exc), f"{path}.pose") from exc

    try:
        date = dt.date.fromisoformat(str(_require(raw, "capture_date", path)))
    except ValueError as exc:
        raise InvariantViolation(f"bad capture_date: {exc}", f"{path}.capture_date") from exc

    planes = []
    for k, coeffs in enumerate(raw.get("planes", [])):
        if len(coeffs) != 4 or not all(math.isfinite(float(c)) for c in coeffs):
            raise InvariantViolation("plane must be 4 finite numbers [a, b, c, d]", f"{path}.planes[{k}]")
        planes.append(Plane.from_coeffs(*coeffs))

    transform = None
    if raw.get("transform") is not None:
        try:
            transform = RigidTransform(
                np.array(raw["transform"]["rotation"], dtype=float),
                np.array(raw["transform"]["translation"], dtype=float),
            )
        except (DomainError, KeyError, ValueError) as exc:
            raise InvariantViolation(f"bad transform: {exc}", f"{path}.transform") from exc

    image_rel = str(_require(raw, "image", path))
    image_path = root / image_rel
    if not image_path.is_file():
        raise MissingFileError(f"{path}.image: file not found: {image_path}")

    assoc_rel = str(_require(raw, "assoc", path))
    assoc_path = root / assoc_rel
    if not assoc_path.is_file():
        raise MissingFileError(f"{path}.assoc: file not found: {assoc_path}")
    idx = read_assoc_png(assoc_path)
    if idx.shape != tuple(assoc_shape):
        raise InvariantViolation(f"assoc matrix shape {idx.shape} != {tuple(assoc_shape)}", f"{path}.assoc")
    if idx.size and (idx.min() < -1 or idx.max() >= len(planes)):
        raise InvariantViolation("assoc index out of range", f"{path}.assoc")

    return PanoRecord(
        pano_id=pano_id,
        width=width,
        height=height,
        pose=pose,
        capture_date=date,
        planes=planes,
        assoc=PlaneAssocMatrix(idx),
        neighbor_ids=[str(n) for n in raw.get("neighbors", [])],
        transform=transform,
        image_path=str(image_path),
    )


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a ``dataset.json`` manifest."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestParseError(f"{path}: top level must be an object")

    root = path.parent
    assoc_shape = tuple(raw.get("assoc_shape", (ASSOC_ROWS, ASSOC_COLS)))
    panos_raw = _require(raw, "panos", "")
    if not isinstance(panos_raw, list):
        raise InvariantViolation("'panos' must be a list", "panos")
    panos = [_parse_pano(p, root, f"panos[{i}]", assoc_shape) for i, p in enumerate(panos_raw)]

    seen = set()
    for i, p in enumerate(panos):
        if p.pano_id in seen:
            raise InvariantViolation(f"duplicate pano_id '{p.pano_id}'", f"panos[{i}].pano_id")
        seen.add(p.pano_id)
    for i, p in enumerate(panos):
        for n in p.neighbor_ids:
            if n not in seen:
                raise InvariantViolation(f"dangling neighbor '{n}'", f"panos[{i}].neighbors")

    footprint = raw.get("footprint")
    if footprint is not None:
        footprint = [tuple(float(c) for c in pt) for pt in footprint]

    return DatasetManifest(
        dataset_id=str(_require(raw, "dataset_id", "")),
        panos=panos,
        frame_origin=str(raw.get("frame_origin", "")),
        footprint=footprint,
        root=str(root),
    )


def write_manifest(manifest: DatasetManifest, out_dir) -> Path:
    """Write ``dataset.json`` plus images and association PNGs into ``out_dir``.

    In-memory pixels are written as PNG; records that already point at an
    image file keep that file (copied when it lives elsewhere).
    """
    out = Path(out_dir)
    (out / "panos").mkdir(parents=True, exist_ok=True)
    entries = []
    for p in manifest.panos:
        image_rel = f"panos/{p.pano_id}.png"
        Image.fromarray(np.asarray(p.image(), dtype=np.uint8)).save(out / image_rel)
        assoc_rel = f"panos/{p.pano_id}_assoc.png"
        write_assoc_png(out / assoc_rel, p.assoc.indices)
        entries.append(
            {
                "pano_id": p.pano_id,
                "image": image_rel,
                "assoc": assoc_rel,
                "width": p.width,
                "height": p.height,
                "pose": {
                    "position": list(p.pose.position),
                    "heading": p.pose.heading,
                    "pitch": p.pose.pitch,
                    "roll": p.pose.roll,
                },
                "capture_date": p.capture_date.isoformat(),
                "neighbors": list(p.neighbor_ids),
                "planes": [pl.to_list() for pl in p.planes],
                "transform": {
                    "rotation": p.transform.rotation.tolist(),
                    "translation": p.transform.translation.tolist(),
                },
            }
        )
    doc = {
        "dataset_id": manifest.dataset_id,
        "frame_origin": manifest.frame_origin,
        "assoc_shape": [ASSOC_ROWS, ASSOC_COLS] if not manifest.panos else list(manifest.panos[0].assoc.indices.shape),
        "footprint": [list(pt) for pt in manifest.footprint] if manifest.footprint else None,
        "panos": entries,
    }
    target = out / "dataset.json"
    target.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return target


# -- selection --------------------------------------------------------------

def _horizontal_distance(p: PanoRecord, center) -> float:
    c = np.asarray(center, dtype=float)
    return float(math.hypot(p.pose.position[0] - c[0], p.pose.position[1] - c[1]))


def select_origin_and_traverse(manifest: DatasetManifest, center, radius: float) -> list[PanoRecord]:
    """Pick the newest panorama near ``center`` and walk neighbour links.

    Only panoramas within ``radius`` (horizontal distance) are kept or walked
    through; ties on capture date go to the smallest ``pano_id``.
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    inside = {p.pano_id: p for p in manifest.panos if _horizontal_distance(p, center) <= radius}
    if not inside:
        raise EmptySelection(f"no panorama within {radius} m of {tuple(center)}")
    origin = min(inside.values(), key=lambda p: (-p.capture_date.toordinal(), p.pano_id))

    order, seen = [], {origin.pano_id}
    queue = deque([origin])
    while queue:
        cur = queue.popleft()
        order.append(cur)
        for nid in cur.neighbor_ids:
            if nid in inside and nid not in seen:
                seen.add(nid)
                queue.append(inside[nid])
    return order


def filter_same_date(panos: list[PanoRecord]) -> list[PanoRecord]:
    """Keep the panoramas captured on the most recent date, in input order."""
    if not panos:
        raise DomainError("filter_same_date needs at least one panorama")
    newest = max(p.capture_date for p in panos)
    return [p for p in panos if p.capture_date == newest]


def plane_for_pixel(rec: PanoRecord, x: float, y: float) -> Optional[int]:
    if not (0 <= x < rec.width and 0 <= y < rec.height):
        raise DomainError(f"pixel ({x}, {y}) outside {rec.width}x{rec.height} panorama")
    a = rec.assoc
    row = min(int(math.floor(y * a.rows / rec.height)), a.rows - 1)
    col = min(int(math.floor(x * a.cols / rec.width)), a.cols - 1)
    idx = int(a.indices[row, col])
    return None if idx < 0 else idx


def with_planes(rec: PanoRecord, planes: list[Plane]) -> PanoRecord:
    """Copy of ``rec`` with a different plane list (same association matrix)."""
    return replace(rec, planes=list(planes))

"""Find the facade rectangle in aligned ortho views and crop to it.

Line segments and boxes use pixel-corner coordinates: pixel ``(i, j)``
spans ``[i, i+1) x [j, j+1)``, with ``y`` growing upwards like the grid.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.cluster import DBSCAN

from .errors import CropOutOfBounds, DomainError, InsufficientStructure
from .ortho import OrthoImage

logger = logging.getLogger(__name__)

AXIS_TOL_DEG = 10.0
GRAD_PERCENTILE = 70.0
GRAD_FLOOR = 0.02
MIN_LENGTH = 20.0
MAX_THICKNESS = 2.5
SMOOTH_SIGMA = 1.0
TENSOR_SIGMA = 2.5
STROKE_WIDTH = 3.5  # edge pairs closer than this with opposite polarity are one thin stroke


@dataclass(frozen=True)
class LineSegment:
    p0: tuple[float, float]
    p1: tuple[float, float]

    def __post_init__(self):
        p0 = (float(self.p0[0]), float(self.p0[1]))
        p1 = (float(self.p1[0]), float(self.p1[1]))
        if p0 == p1:
            raise DomainError("zero-length segment")
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "p1", p1)

    @property
    def length(self) -> float:
        return math.hypot(self.p1[0] - self.p0[0], self.p1[1] - self.p0[1])

    @property
    def angle(self) -> float:
        """Direction in degrees, folded into [0, 180)."""
        a = math.degrees(math.atan2(self.p1[1] - self.p0[1], self.p1[0] - self.p0[0])) % 180.0
        return 0.0 if a >= 180.0 else a

    def to_list(self) -> list[float]:
        return [self.p0[0], self.p0[1], self.p1[0], self.p1[1]]


@dataclass(frozen=True)
class AxisLine:
    """An axis-parallel line: ``offset`` is x for vertical lines, y for horizontal."""

    axis: str  # "v" or "h"
    offset: float
    lo: float
    hi: float

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def segment(self) -> LineSegment:
        if self.axis == "v":
            return LineSegment((self.offset, self.lo), (self.offset, self.hi))
        return LineSegment((self.lo, self.offset), (self.hi, self.offset))


@dataclass(frozen=True)
class FacadeBox:
    bbox: tuple[float, float, float, float]
    score: float = 0.0

    def __post_init__(self):
        b = tuple(float(c) for c in self.bbox)
        if not (b[0] < b[2] and b[1] < b[3]):
            raise DomainError(f"invalid facade box {self.bbox}")
        object.__setattr__(self, "bbox", b)

    def to_dict(self) -> dict:
        return {"bbox": list(self.bbox), "score": self.score}


# -- line detection ---------------------------------------------------------

def color_gradient(img: OrthoImage, sigma: float = SMOOTH_SIGMA):
    """Gradient magnitude and direction (degrees, mod 180) over all colour channels.

    Uses the colour structure tensor, so edges between colours of equal
    brightness (a wall against the sky) are still found.
    """
    rgb = img.pixels[..., :3].astype(np.float64) / 255.0
    gxx = gyy = gxy = 0.0
    for c in range(3):
        ch = ndimage.gaussian_filter(rgb[..., c], sigma) if sigma > 0 else rgb[..., c]
        gx = ndimage.sobel(ch, axis=1) / 8.0
        gy = ndimage.sobel(ch, axis=0) / 8.0
        gxx = gxx + gx * gx
        gyy = gyy + gy * gy
        gxy = gxy + gx * gy
    lam = 0.5 * (gxx + gyy + np.sqrt((gxx - gyy) ** 2 + 4 * gxy * gxy))
    # orientation from the locally averaged tensor is stable along stair-stepped edges
    sxx, syy, sxy = (ndimage.gaussian_filter(t, TENSOR_SIGMA) for t in (gxx, gyy, gxy))
    theta = 0.5 * np.degrees(np.arctan2(2 * sxy, sxx - syy))
    return np.sqrt(lam), theta % 180.0


def _ridge(mag: np.ndarray, grad_dir: np.ndarray) -> np.ndarray:
    """Pixels not smaller than both neighbours along the gradient direction."""
    q = np.floor(((grad_dir + 22.5) % 180.0) / 45.0).astype(int)  # 0, 45, 90, 135 degrees
    pad = np.pad(mag, 1, mode="edge")
    H, W = mag.shape
    keep = np.zeros(mag.shape, dtype=bool)
    # (dy, dx) per direction; y grows with row index
    for k, (dy, dx) in enumerate(((0, 1), (1, 1), (1, 0), (1, -1))):
        a = pad[1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
        b = pad[1 - dy : 1 - dy + H, 1 - dx : 1 - dx + W]
        keep |= (q == k) & (mag >= a) & (mag >= b)
    return keep


def detect_line_segments(
    img: OrthoImage,
    grad_percentile: float = GRAD_PERCENTILE,
    min_length: float = MIN_LENGTH,
    grad_floor: float = GRAD_FLOOR,
    max_thickness: float = MAX_THICKNESS,
) -> list[LineSegment]:
    """Line segments from regions of consistent gradient orientation.

    Edge pixels (gradient maxima across the edge) whose magnitude exceeds
    the given percentile (and an absolute floor) are split into eight 22.5 degree orientation bins, bin
    0 centred on horizontal lines. Each 8-connected region is fitted with a
    principal axis; thin regions at least ``min_length`` long become
    segments. Gradients touching the background are ignored so the border
    of the valid region yields no lines.
    """
    mag, grad_dir = color_gradient(img)
    valid = ndimage.binary_erosion(img.foreground, iterations=3, border_value=1)
    if not valid.any():
        return []
    thr = max(float(np.percentile(mag[valid], grad_percentile)), grad_floor)
    strong = valid & (mag > thr) & _ridge(mag, grad_dir)
    if not strong.any():
        return []
    # level-line direction is perpendicular to the gradient
    ang = (grad_dir + 90.0) % 180.0
    bins = np.floor((ang + 11.25) / 22.5).astype(int) % 8

    gray = ndimage.gaussian_filter(img.pixels[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114]) / 255.0, SMOOTH_SIGMA)
    lum_grad = np.stack([ndimage.sobel(gray, axis=1), ndimage.sobel(gray, axis=0)], axis=-1) / 8.0

    found = []
    for b in range(8):
        labels, n = ndimage.label(strong & (bins == b), structure=np.ones((3, 3)))
        if n == 0:
            continue
        for k, sl in enumerate(ndimage.find_objects(labels), start=1):
            ys, xs = np.nonzero(labels[sl] == k)
            if len(xs) < min_length:
                continue
            w = mag[sl][ys, xs]
            pts = np.stack([xs + sl[1].start + 0.5, ys + sl[0].start + 0.5], axis=1)
            c = (pts * w[:, None]).sum(axis=0) / w.sum()
            d = pts - c
            cov = (d * w[:, None]).T @ d / w.sum()
            evals, evecs = np.linalg.eigh(cov)
            direction = evecs[:, 1]
            if math.sqrt(max(evals[0], 0.0)) > max_thickness:
                continue
            t = d @ direction
            lo, hi = t.min(), t.max()
            if hi - lo < min_length:
                continue
            normal = np.array([-direction[1], direction[0]])
            g = lum_grad[ys + sl[0].start, xs + sl[1].start] @ normal
            polarity = float(np.sign(g.mean())) if abs(g.mean()) > 0.25 * np.abs(g).mean() else 0.0
            found.append((c, direction, lo, hi, polarity))
    out = [LineSegment(tuple(c + lo * u), tuple(c + hi * u)) for c, u, lo, hi, _ in _merge_strokes(found)]
    out.sort(key=lambda s: (s.p0, s.p1))
    return out


def _merge_strokes(found):
    """Replace each close, parallel, opposite-polarity edge pair by its centre line.

    A thin dark or bright stroke produces two edges of opposite polarity a
    pixel or two apart; drawn lines should come out as one segment.
    """
    pairs = []
    for i, j in combinations(range(len(found)), 2):
        ci, ui, loi, hii, pi = found[i]
        cj, uj, loj, hij, pj = found[j]
        # polarity is measured against each segment's own normal
        if pi * pj * np.sign(ui @ uj) >= 0 or abs(ui @ uj) < math.cos(math.radians(5.0)):
            continue
        normal = np.array([-ui[1], ui[0]])
        gap = abs((cj - ci) @ normal)
        if gap > STROKE_WIDTH:
            continue
        a = (loi, hii)
        b = sorted(((cj - ci) @ ui + loj * (ui @ uj), (cj - ci) @ ui + hij * (ui @ uj)))
        inter = min(a[1], b[1]) - max(a[0], b[0])
        if inter < 0.5 * min(hii - loi, hij - loj):
            continue
        pairs.append((gap, i, j, min(a[0], b[0]), max(a[1], b[1])))
    used, merged = set(), []
    for gap, i, j, lo, hi in sorted(pairs):
        if i in used or j in used:
            continue
        used |= {i, j}
        ci, ui = found[i][0], found[i][1]
        normal = np.array([-ui[1], ui[0]])
        centre = ci + 0.5 * ((found[j][0] - ci) @ normal) * normal
        merged.append((centre, ui, lo, hi, 0.0))
    return [f for k, f in enumerate(found) if k not in used] + merged


def classify_axis_lines(lines: Sequence[LineSegment], tol: float = AXIS_TOL_DEG):
    """Split into (vertical, horizontal, other) by a tolerance in degrees."""
    vertical, horizontal, other = [], [], []
    for s in lines:
        a = s.angle
        if abs(a - 90.0) <= tol:
            vertical.append(s)
        elif min(a, 180.0 - a) <= tol:
            horizontal.append(s)
        else:
            other.append(s)
    return vertical, horizontal, other


def to_axis_line(s: LineSegment, axis: str) -> AxisLine:
    if axis == "v":
        return AxisLine("v", (s.p0[0] + s.p1[0]) / 2, min(s.p0[1], s.p1[1]), max(s.p0[1], s.p1[1]))
    return AxisLine("h", (s.p0[1] + s.p1[1]) / 2, min(s.p0[0], s.p1[0]), max(s.p0[0], s.p1[0]))


def _span_overlap(a: AxisLine, b: AxisLine) -> float:
    inter = min(a.hi, b.hi) - max(a.lo, b.lo)
    shorter = min(a.length, b.length)
    return inter / shorter if shorter > 0 else 0.0


def build_reliable_set(
    per_image_lines: Sequence[Sequence[LineSegment]],
    offset_tol: float = 5.0,
    min_overlap: float = 0.5,
    min_images: int = 2,
    tol: float = AXIS_TOL_DEG,
) -> list[AxisLine]:
    """Axis lines seen consistently in several aligned images.

    Lines of one axis are joined when their offsets differ by at most
    ``offset_tol`` px and their spans overlap by at least ``min_overlap`` of
    the shorter span. Each connected group seen in ``min_images`` or more
    images becomes one line at the median offset spanning the union.
    """
    out = []
    for axis in ("v", "h"):
        items = []
        for k, lines in enumerate(per_image_lines):
            v, h, _ = classify_axis_lines(lines, tol)
            for s in v if axis == "v" else h:
                items.append((k, to_axis_line(s, axis)))
        n = len(items)
        if n == 0:
            continue
        off = np.array([a.offset for _, a in items])
        lo = np.array([a.lo for _, a in items])
        hi = np.array([a.hi for _, a in items])
        inter = np.minimum(hi[:, None], hi[None, :]) - np.maximum(lo[:, None], lo[None, :])
        shorter = np.minimum((hi - lo)[:, None], (hi - lo)[None, :])
        adj = (np.abs(off[:, None] - off[None, :]) <= offset_tol) & (inter >= min_overlap * shorter)
        _, labels = connected_components(csr_matrix(adj), directed=False)
        for lab in np.unique(labels):
            idx = np.nonzero(labels == lab)[0]
            if len({items[i][0] for i in idx}) < min_images:
                continue
            out.append(AxisLine(axis, float(np.median(off[idx])), float(lo[idx].min()), float(hi[idx].max())))
    out.sort(key=lambda a: (a.axis, a.offset, a.lo))
    return out


# -- RANSAC facade box ------------------------------------------------------

def score_box(box, lines: Sequence[LineSegment], tol: float = 3.0) -> float:
    """Length of lines inside the box minus length of lines crossing its border.

    A line is inside when both endpoints lie within the box grown by
    ``tol``; it crosses when it reaches both the box shrunk by ``tol`` and
    the area outside the grown box.
    """
    if not lines:
        return 0.0
    P = np.array([s.to_list() for s in lines])
    L = np.hypot(P[:, 2] - P[:, 0], P[:, 3] - P[:, 1])
    return float(_score_many(np.asarray([box], dtype=float), P, L, tol)[0])


def _score_many(boxes: np.ndarray, P: np.ndarray, L: np.ndarray, tol: float) -> np.ndarray:
    x0, y0, x1, y1 = (boxes[:, i : i + 1] for i in range(4))
    ax, ay, bx, by = (P[None, :, i] for i in range(4))

    def within(px, py, grow):
        return (px >= x0 - grow) & (px <= x1 + grow) & (py >= y0 - grow) & (py <= y1 + grow)

    inside = within(ax, ay, tol) & within(bx, by, tol)
    # axis-parallel clipping of the segment against the shrunk box
    reaches_core = _segment_hits_box(ax, ay, bx, by, x0 + tol, y0 + tol, x1 - tol, y1 - tol)
    leaves = ~inside
    crossing = reaches_core & leaves
    return (inside * L).sum(axis=1) - (crossing * L).sum(axis=1)


def _segment_hits_box(ax, ay, bx, by, x0, y0, x1, y1):
    """Liang-Barsky test: does segment a-b touch the box?"""
    dx, dy = bx - ax, by - ay
    t0 = np.zeros(np.broadcast(ax, x0).shape)
    t1 = np.ones_like(t0)
    ok = np.broadcast_to(x1 > x0, t0.shape) & np.broadcast_to(y1 > y0, t0.shape)
    for p, q in ((-dx, ax - x0), (dx, x1 - ax), (-dy, ay - y0), (dy, y1 - ay)):
        p = np.broadcast_to(p, t0.shape)
        q = np.broadcast_to(q, t0.shape)
        par = np.abs(p) < 1e-12
        ok = ok & ~(par & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(par, 0.0, q / np.where(par, 1.0, p))
        t0 = np.where(~par & (p < 0), np.maximum(t0, r), t0)
        t1 = np.where(~par & (p > 0), np.minimum(t1, r), t1)
    return ok & (t0 <= t1)


def _candidate_boxes(vert: list[AxisLine], horz: list[AxisLine], iterations: int, rng, min_size: float):
    nv, nh = len(vert), len(horz)
    vpairs = list(combinations(range(nv), 2))
    hpairs = list(combinations(range(nh), 2))
    if len(vpairs) * len(hpairs) <= iterations:
        picks = [(a, b) for a in vpairs for b in hpairs]
    else:
        wv = np.array([v.length for v in vert])
        wh = np.array([h.length for h in horz])
        picks = []
        for _ in range(iterations):
            a = tuple(rng.choice(nv, size=2, replace=False, p=wv / wv.sum()))
            b = tuple(rng.choice(nh, size=2, replace=False, p=wh / wh.sum()))
            picks.append((a, b))
    boxes = []
    for (i, j), (k, m) in picks:
        xa, xb = sorted((vert[i].offset, vert[j].offset))
        ya, yb = sorted((horz[k].offset, horz[m].offset))
        if xb - xa >= min_size and yb - ya >= min_size:
            boxes.append((xa, ya, xb, yb))
    return np.array(boxes, dtype=float).reshape(-1, 4)


def ransac_facade(
    images: Sequence[OrthoImage],
    reliable: Sequence[AxisLine],
    iterations: int = 1000,
    *,
    seed: int = 0,
    per_image_lines: Optional[Sequence[Sequence[LineSegment]]] = None,
    eps: float = 15.0,
    min_samples: int = 2,
    inside_tol: float = 3.0,
    min_size: float = 20.0,
) -> tuple[FacadeBox, list[FacadeBox]]:
    """Consensus facade box from per-image RANSAC over reliable lines.

    Every trial picks two vertical and two horizontal reliable lines; when
    there are fewer pairs than ``iterations`` all of them are tried. Each
    image keeps its best-scoring box, and the median of the largest DBSCAN
    cluster of those boxes is returned (ties go to the cluster with the
    higher total score). Without any cluster, the best single box wins.

    Returns the consensus and the per-image winners.
    """
    vert = [a for a in reliable if a.axis == "v"]
    horz = [a for a in reliable if a.axis == "h"]
    if len(vert) < 2 or len(horz) < 2:
        raise InsufficientStructure(f"{len(vert)} vertical and {len(horz)} horizontal reliable lines; need 2 + 2")
    if per_image_lines is None:
        per_image_lines = [detect_line_segments(im) for im in images]

    rng = np.random.default_rng(seed)
    boxes = _candidate_boxes(vert, horz, iterations, rng, min_size)
    if len(boxes) == 0:
        raise InsufficientStructure("no reliable line pairs span a box")

    winners = []
    for lines in per_image_lines:
        if not lines:
            continue
        P = np.array([s.to_list() for s in lines])
        L = np.hypot(P[:, 2] - P[:, 0], P[:, 3] - P[:, 1])
        scores = np.concatenate(
            [_score_many(boxes[i : i + 256], P, L, inside_tol) for i in range(0, len(boxes), 256)]
        )
        k = int(np.argmax(scores))
        winners.append(FacadeBox(tuple(boxes[k]), float(scores[k])))
    if not winners:
        raise InsufficientStructure("no image has line structure")

    X = np.array([w.bbox for w in winners])
    labels = DBSCAN(eps=eps, min_samples=min_samples).fit(X).labels_
    clusters = [lab for lab in np.unique(labels) if lab >= 0]
    if not clusters:
        best = max(winners, key=lambda w: w.score)
        logger.info("no corner consensus; using the best single box")
        return best, winners
    lab = max(
        clusters,
        key=lambda c: (int(np.sum(labels == c)), sum(w.score for w, l in zip(winners, labels) if l == c)),
    )
    members = labels == lab
    med = np.median(X[members], axis=0)
    score = float(np.mean([w.score for w, m in zip(winners, members) if m]))
    return FacadeBox(tuple(med), score), winners


# -- crop -------------------------------------------------------------------

def integer_box(box: FacadeBox) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = (int(math.floor(c + 0.5)) for c in box.bbox)
    if x1 <= x0 or y1 <= y0:
        raise CropOutOfBounds(f"box {box.bbox} rounds to an empty crop")
    return x0, y0, x1, y1


def crop_facades(images: Sequence[OrthoImage], box: FacadeBox) -> list[OrthoImage]:
    """Crop every image to ``box`` (rounded to whole pixels).

    Parts of the box outside an image are padded with background. The crop's
    grid origin moves by the box offset; the pixel size is unchanged.
    """
    x0, y0, x1, y1 = integer_box(box)
    out = []
    for im in images:
        if x1 <= 0 or y1 <= 0 or x0 >= im.width or y0 >= im.height:
            raise CropOutOfBounds(f"box {box.bbox} misses image {im.source_id} ({im.width}x{im.height})")
        pix = np.zeros((y1 - y0, x1 - x0, 4), dtype=np.uint8)
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x1, im.width), min(y1, im.height)
        pix[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = im.pixels[sy0:sy1, sx0:sx1]
        origin = (im.grid_origin2d[0] + x0 * im.pixel_size, im.grid_origin2d[1] + y0 * im.pixel_size)
        out.append(im.with_pixels(pix, grid_origin2d=origin))
    return out


# -- lines file -------------------------------------------------------------

def load_lines(path) -> dict[str, list[LineSegment]]:
    """Read ``{"images": {source_id: [[x0, y0, x1, y1], ...]}}``."""
    doc = json.loads(Path(path).read_text())
    return {
        str(k): [LineSegment((s[0], s[1]), (s[2], s[3])) for s in segs] for k, segs in doc["images"].items()
    }


def save_lines(path, lines: dict[str, Sequence[LineSegment]]) -> None:
    doc = {"images": {k: [s.to_list() for s in v] for k, v in lines.items()}}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

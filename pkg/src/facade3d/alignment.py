"""Register orthographic views of one facade onto a common pixel grid.

Coordinates here are array indices: pixel ``(x, y)`` has its centre at the
integer position, ``x`` along columns and ``y`` along rows. The transform
family is scale plus translation; views of one plane share their in-plane
axes, so there is no rotation to estimate.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import AlignmentFailed, InsufficientMatches
from .ortho import OrthoImage

logger = logging.getLogger(__name__)

RATIO = 0.75
PATCH_RADIUS = 16
BLUR_SIGMA = 2.0
HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
NMS_RADIUS = 3
MAX_FEATURES = 2000


@dataclass(frozen=True)
class Alignment2D:
    """Maps source pixel ``(x, y)`` to reference pixel ``(s*x + tx, s*y + ty)``."""

    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0
    inlier_ratio: float = 1.0

    def apply(self, xy) -> np.ndarray:
        return self.scale * np.asarray(xy, dtype=float) + np.array([self.tx, self.ty])

    def to_dict(self) -> dict:
        return {"scale": self.scale, "tx": self.tx, "ty": self.ty, "inlier_ratio": self.inlier_ratio}


@dataclass(frozen=True)
class Correspondence:
    src: tuple[float, float]
    ref: tuple[float, float]
    score: float = 1.0


@dataclass(frozen=True)
class Features:
    xy: np.ndarray  # (N, 2) subpixel positions
    desc: np.ndarray  # (N, D) zero-mean, unit-norm patches


def _gray(img: OrthoImage) -> np.ndarray:
    rgb = img.pixels[..., :3].astype(np.float64) / 255.0
    g = rgb @ np.array([0.299, 0.587, 0.114])
    g[~img.foreground] = 0.0
    return ndimage.gaussian_filter(g, BLUR_SIGMA)


def detect_features(img: OrthoImage, max_features: int = MAX_FEATURES, patch_radius: int = PATCH_RADIUS) -> Features:
    """Harris corners with subpixel peaks and normalised patch descriptors.

    Only corners whose whole patch lies on foreground are kept, so the
    border of the valid region never produces features.
    """
    g = _gray(img)
    ix = ndimage.sobel(g, axis=1) / 8.0
    iy = ndimage.sobel(g, axis=0) / 8.0
    sxx = ndimage.gaussian_filter(ix * ix, HARRIS_SIGMA)
    syy = ndimage.gaussian_filter(iy * iy, HARRIS_SIGMA)
    sxy = ndimage.gaussian_filter(ix * iy, HARRIS_SIGMA)
    R = sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2

    margin = patch_radius + 2
    usable = ndimage.binary_erosion(img.foreground, iterations=margin, border_value=0)
    peak = (R == ndimage.maximum_filter(R, size=2 * NMS_RADIUS + 1)) & usable
    rmax = R[usable].max() if usable.any() else 0.0
    peak &= R > max(1e-3 * rmax, 1e-10)
    ys, xs = np.nonzero(peak)
    if len(xs) == 0:
        return Features(np.zeros((0, 2)), np.zeros((0, (2 * patch_radius + 1) ** 2)))
    order = np.lexsort((xs, ys, -R[ys, xs]))[:max_features]
    ys, xs = ys[order], xs[order]

    def offset(a, c, b):
        den = a - 2 * c + b
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(np.abs(den) > 1e-15, 0.5 * (a - b) / den, 0.0)
        return np.clip(d, -0.5, 0.5)

    c = R[ys, xs]
    dx = offset(R[ys, xs - 1], c, R[ys, xs + 1])
    dy = offset(R[ys - 1, xs], c, R[ys + 1, xs])

    r = patch_radius
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    patches = g[ys[:, None, None] + oy, xs[:, None, None] + ox].reshape(len(xs), -1)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1)
    keep = norms > 1e-3 * np.sqrt(patches.shape[1])
    desc = patches[keep] / norms[keep, None]
    xy = np.stack([xs + dx, ys + dy], axis=1)[keep]
    return Features(xy, desc)


def match_features(ref: Features, src: Features, ratio: float = RATIO) -> list[Correspondence]:
    """Ratio-tested, cross-checked nearest-neighbour matches."""
    if len(ref.xy) < 2 or len(src.xy) < 2:
        return []
    corr = src.desc @ ref.desc.T  # cosine similarity of unit vectors
    d2 = np.clip(2.0 - 2.0 * corr, 0.0, None)
    order = np.argsort(d2, axis=1)
    best, second = order[:, 0], order[:, 1]
    rows = np.arange(len(src.xy))
    d1 = np.sqrt(d2[rows, best])
    dn = np.sqrt(d2[rows, second])
    back = np.argmin(d2, axis=0)
    ok = (d1 < ratio * dn) & (back[best] == rows)
    out = []
    for i in np.nonzero(ok)[0]:
        j = best[i]
        out.append(
            Correspondence(
                src=(float(src.xy[i, 0]), float(src.xy[i, 1])),
                ref=(float(ref.xy[j, 0]), float(ref.xy[j, 1])),
                score=float(np.clip(corr[i, j], 0.0, 1.0)),
            )
        )
    return out


def detect_and_match(ref: OrthoImage, src: OrthoImage, ratio: float = RATIO) -> list[Correspondence]:
    return match_features(detect_features(ref), detect_features(src), ratio)


def _fit(src: np.ndarray, ref: np.ndarray) -> tuple[float, float, float]:
    """Least-squares scale and translation mapping ``src`` onto ``ref``."""
    ms, mr = src.mean(axis=0), ref.mean(axis=0)
    cs, cr = src - ms, ref - mr
    den = float(np.sum(cs * cs))
    s = float(np.sum(cs * cr) / den) if den > 1e-12 else 1.0
    t = mr - s * ms
    return s, float(t[0]), float(t[1])


def estimate_alignment(
    corrs: Sequence[Correspondence],
    threshold: float = 2.0,
    iterations: int = 500,
    min_inlier_ratio: float = 0.5,
    seed: int = 0,
) -> Alignment2D:
    """RANSAC over scale and translation from 2-point samples, then a refit."""
    if len(corrs) < 4:
        raise InsufficientMatches(f"{len(corrs)} correspondences, need at least 4")
    src = np.array([c.src for c in corrs], dtype=float)
    ref = np.array([c.ref for c in corrs], dtype=float)
    n = len(src)
    rng = np.random.default_rng(seed)

    def inliers(s, tx, ty):
        res = np.linalg.norm(s * src + np.array([tx, ty]) - ref, axis=1)
        return res < threshold

    best_mask, best_count = None, -1
    for _ in range(iterations):
        i, j = rng.choice(n, size=2, replace=False)
        ds = src[j] - src[i]
        dr = ref[j] - ref[i]
        den = float(ds @ ds)
        if den < 1e-9:
            continue
        s = float(ds @ dr) / den
        if s <= 0:
            continue
        t = ref[i] - s * src[i]
        mask = inliers(s, t[0], t[1])
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
    if best_mask is None or best_count < 2:
        raise AlignmentFailed("no consistent sample")

    s, tx, ty = _fit(src[best_mask], ref[best_mask])
    mask = inliers(s, tx, ty)
    if mask.sum() >= 2:
        s, tx, ty = _fit(src[mask], ref[mask])
        mask = inliers(s, tx, ty)
    ratio = float(mask.mean())
    if ratio < min_inlier_ratio or s <= 0:
        raise AlignmentFailed(f"inlier ratio {ratio:.2f} below {min_inlier_ratio}")
    return Alignment2D(s, tx, ty, ratio)


def resample_into(src: OrthoImage, ref: OrthoImage, a: Alignment2D) -> OrthoImage:
    """Bilinear resampling of ``src`` into the grid of ``ref``.

    A pixel is foreground only when all four source neighbours are.
    """
    H, W = ref.height, ref.width
    Y, X = np.mgrid[0:H, 0:W].astype(float)
    sx = (X - a.tx) / a.scale
    sy = (Y - a.ty) / a.scale
    coords = np.stack([sy, sx])
    fg = ndimage.map_coordinates(src.foreground.astype(float), coords, order=1, mode="constant", cval=0.0)
    fg = fg > 1.0 - 1e-9
    out = np.zeros((H, W, 4), dtype=np.uint8)
    for ch in range(3):
        vals = ndimage.map_coordinates(src.pixels[..., ch].astype(float), coords, order=1, mode="nearest")
        out[..., ch] = np.where(fg, np.clip(np.rint(vals), 0, 255), 0).astype(np.uint8)
    out[..., 3] = np.where(fg, 255, 0)
    return ref.with_pixels(out, source_id=src.source_id)


@dataclass(frozen=True)
class AlignmentRecord:
    source_id: str
    status: str  # "reference", "aligned" or "dropped"
    transform: Alignment2D | None
    matches: int
    reason: str = ""

    def to_dict(self) -> dict:
        return {
            "source_id": self.source_id,
            "status": self.status,
            "transform": None if self.transform is None else self.transform.to_dict(),
            "matches": self.matches,
            "reason": self.reason,
        }


def reference_index(images: Sequence[OrthoImage]) -> int:
    areas = [int(np.count_nonzero(im.foreground)) for im in images]
    return int(np.argmax(areas))  # first maximum on ties


def align_group_report(
    images: Sequence[OrthoImage],
    *,
    seed: int = 0,
    workers: int = 1,
    min_overlap: float = 0.1,
    threshold: float = 2.0,
    iterations: int = 500,
    ratio: float = RATIO,
    min_inlier_ratio: float = 0.5,
) -> tuple[list[OrthoImage], list[AlignmentRecord]]:
    """Align every image to the one with the largest foreground.

    Images whose foreground is below ``min_overlap`` times the reference's,
    or whose alignment fails, are dropped and reported. The surviving images
    keep their input order and all share the reference grid.
    """
    if not images:
        return [], []
    k = reference_index(images)
    ref = images[k]
    ref_area = np.count_nonzero(ref.foreground)
    ref_feats = detect_features(ref)

    def run(i):
        im = images[i]
        if i == k:
            return im, AlignmentRecord(im.source_id, "reference", Alignment2D(), 0)
        if np.count_nonzero(im.foreground) < min_overlap * ref_area:
            return None, AlignmentRecord(im.source_id, "dropped", None, 0, "too little foreground")
        corrs = match_features(ref_feats, detect_features(im), ratio)
        try:
            a = estimate_alignment(corrs, threshold, iterations, min_inlier_ratio, seed=seed + i)
        except (InsufficientMatches, AlignmentFailed) as exc:
            logger.warning("alignment of %s dropped: %s", im.source_id, exc)
            return None, AlignmentRecord(im.source_id, "dropped", None, len(corrs), str(exc))
        return resample_into(im, ref, a), AlignmentRecord(im.source_id, "aligned", a, len(corrs))

    idx = range(len(images))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, idx))
    else:
        results = [run(i) for i in idx]
    aligned = [im for im, _ in results if im is not None]
    return aligned, [rec for _, rec in results]


def align_group(images: Sequence[OrthoImage], **kwargs) -> list[OrthoImage]:
    return align_group_report(images, **kwargs)[0]

"""Compare a predicted thermal model with ground truth.

Windows are matched per facade in the facade-plane 2-D frame. Metric
conventions for empty sets:

* precision is 0 when there are no predictions but ground truth exists;
  recall is 0 when nothing is matched. With neither predictions nor ground
  truth both are 1.
* F1 is 0 whenever precision + recall is 0.
* means over an empty match set raise :class:`UndefinedMetric` and are
  reported as ``null``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import UndefinedMetric
from .fusion import iou
from .geometry import Plane

Point = tuple[float, float, float]
Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class GTFacade:
    facade_id: str
    plane: Plane
    corners: tuple[Point, ...]
    width_m: float
    height_m: float
    windows: list  # each a 4-tuple of world corners
    wwr: float

    @property
    def area_m2(self) -> float:
        return self.width_m * self.height_m


@dataclass(frozen=True)
class GroundTruth:
    building_id: str
    facades: list
    footprint: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "building_id": self.building_id,
            "footprint": [list(p) for p in self.footprint],
            "facades": [
                {
                    "facade_id": f.facade_id,
                    "plane": f.plane.to_list(),
                    "corners": [list(c) for c in f.corners],
                    "width_m": f.width_m,
                    "height_m": f.height_m,
                    "area_m2": f.area_m2,
                    "windows": [[list(c) for c in w] for w in f.windows],
                    "wwr": f.wwr,
                }
                for f in self.facades
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        facades = []
        for f in d["facades"]:
            p = f["plane"]
            facades.append(
                GTFacade(
                    facade_id=str(f["facade_id"]),
                    plane=Plane.from_coeffs(*p),
                    corners=tuple(tuple(map(float, c)) for c in f["corners"]),
                    width_m=float(f["width_m"]),
                    height_m=float(f["height_m"]),
                    windows=[tuple(tuple(map(float, c)) for c in w) for w in f["windows"]],
                    wwr=float(f["wwr"]),
                )
            )
        return cls(str(d["building_id"]), facades, [tuple(p) for p in d.get("footprint", [])])


def save_ground_truth(gt: GroundTruth, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(gt.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))


# -- window matching ----------------------------------------------------------

@dataclass(frozen=True)
class MatchSet:
    pairs: list  # (pred index, gt index, iou)
    unmatched_pred: list
    unmatched_gt: list
    pred: list = field(default_factory=list, repr=False)
    gt: list = field(default_factory=list, repr=False)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def match_windows(
    pred: Sequence[Rect],
    gt: Sequence[Rect],
    iou_threshold: float = 0.5,
    scores: Optional[Sequence[float]] = None,
) -> MatchSet:
    """Greedy one-to-one matching by descending IoU.

    Ties go to the higher prediction score, then the lower prediction index.
    Only pairs with IoU strictly above ``iou_threshold`` are accepted.
    """
    pred, gt = [tuple(p) for p in pred], [tuple(g) for g in gt]
    scores = [1.0] * len(pred) if scores is None else list(scores)
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            v = iou(p, g)
            if v > iou_threshold:
                cands.append((-v, -scores[i], i, j, v))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, _, i, j, v in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, v))
    return MatchSet(
        pairs=pairs,
        unmatched_pred=[i for i in range(len(pred)) if i not in used_p],
        unmatched_gt=[j for j in range(len(gt)) if j not in used_g],
        pred=pred,
        gt=gt,
    )


def merge_match_sets(sets: Sequence[MatchSet]) -> MatchSet:
    """Concatenate match sets from several facades into one."""
    pairs, up, ug, pred, gt = [], [], [], [], []
    for ms in sets:
        op, og = len(pred), len(gt)
        pairs += [(i + op, j + og, v) for i, j, v in ms.pairs]
        up += [i + op for i in ms.unmatched_pred]
        ug += [j + og for j in ms.unmatched_gt]
        pred += list(ms.pred)
        gt += list(ms.gt)
    return MatchSet(pairs, up, ug, pred, gt)


def f1_score(ms: MatchSet) -> tuple[float, float, float]:
    tp, fp, fn = ms.tp, ms.fp, ms.fn
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _require_pairs(ms: MatchSet):
    if not ms.pairs:
        raise UndefinedMetric("no matched windows")


def _area(r: Rect) -> float:
    return (r[2] - r[0]) * (r[3] - r[1])


def mean_iou(ms: MatchSet) -> float:
    _require_pairs(ms)
    return float(np.mean([v for _, _, v in ms.pairs]))


def mean_abs_rel_area_err(ms: MatchSet) -> float:
    _require_pairs(ms)
    return float(np.mean([abs(_area(ms.pred[i]) - _area(ms.gt[j])) / _area(ms.gt[j]) for i, j, _ in ms.pairs]))


def mean_abs_pos_err(ms: MatchSet) -> float:
    _require_pairs(ms)
    errs = []
    for i, j, _ in ms.pairs:
        p, g = ms.pred[i], ms.gt[j]
        errs.append(math.hypot((p[0] + p[2] - g[0] - g[2]) / 2, (p[1] + p[3] - g[1] - g[3]) / 2))
    return float(np.mean(errs))


def wwr_errors(pred: dict, gt: dict) -> tuple[Optional[float], float, Optional[float]]:
    """Signed WWR errors ``(standard, total, imputed)``.

    ``pred`` and ``gt`` map facade ids to WWR. Missing facades count as 0.0 in
    ``total`` and as the mean predicted WWR in ``imputed``. ``standard`` and
    ``imputed`` are None when no facade was predicted.
    """
    if not gt:
        raise UndefinedMetric("ground truth has no facades")
    found = [k for k in gt if k in pred]
    standard = float(np.mean([pred[k] - gt[k] for k in found])) if found else None
    total = float(np.mean([pred.get(k, 0.0) - gt[k] for k in gt]))
    if found:
        fill = float(np.mean([pred[k] for k in found]))
        imputed = float(np.mean([pred.get(k, fill) - gt[k] for k in gt]))
    else:
        imputed = None
    return standard, total, imputed


def _safe(fn, ms):
    try:
        return fn(ms)
    except UndefinedMetric:
        return None


# -- whole-model evaluation ---------------------------------------------------

def associate_facades(model, gt: GroundTruth, max_angle_deg: float = 15.0, max_offset: float = 1.0) -> dict:
    """Map predicted facade ids to ground-truth facade ids by plane proximity.

    Each ground-truth facade is used at most once; closest pairs go first.
    """
    cos_min = math.cos(math.radians(max_angle_deg))
    cands = []
    for pf in model.facades:
        n = np.array(pf.plane.normal)
        c = np.array(pf.center3d)
        for gf in gt.facades:
            gn = np.array(gf.plane.normal)
            cos = float(n @ gn)
            if abs(cos) < cos_min:
                continue
            off = abs(float(gn @ c) - gf.plane.d)
            if off > max_offset:
                continue
            cands.append((1 - abs(cos) + 0.01 * off, pf.facade_id, gf.facade_id))
    cands.sort()
    out, used = {}, set()
    for _, pid, gid in cands:
        if pid in out or gid in used:
            continue
        out[pid] = gid
        used.add(gid)
    return out


def _rect_on(basis, corners) -> Rect:
    uv = basis.to_plane(np.asarray(corners, dtype=float))
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def evaluate(model, gt: GroundTruth, iou_threshold: float = 0.5) -> dict:
    """Full evaluation report for one building."""
    assoc = associate_facades(model, gt)
    gt_by_id = {f.facade_id: f for f in gt.facades}
    per_facade, sets = [], []
    pred_wwr = {}
    for pf in model.facades:
        gid = assoc.get(pf.facade_id)
        if gid is None:
            continue
        gf = gt_by_id[gid]
        basis = pf.plane_basis()
        pred_rects = [_rect_on(basis, w.corners) for w in pf.windows]
        gt_rects = [_rect_on(basis, w) for w in gf.windows]
        ms = match_windows(pred_rects, gt_rects, iou_threshold, [w.score for w in pf.windows])
        sets.append(ms)
        pred_wwr[gid] = pf.wwr
        p, r, f1 = f1_score(ms)
        per_facade.append(
            {
                "pred_facade": pf.facade_id,
                "gt_facade": gid,
                "wwr_pred": pf.wwr,
                "wwr_gt": gf.wwr,
                "wwr_error": pf.wwr - gf.wwr,
                "tp": ms.tp,
                "fp": ms.fp,
                "fn": ms.fn,
                "f1": f1,
                "mean_iou": _safe(mean_iou, ms),
                "mean_abs_rel_area_err": _safe(mean_abs_rel_area_err, ms),
                "mean_abs_pos_err": _safe(mean_abs_pos_err, ms),
            }
        )

    found = merge_match_sets(sets)
    p, r, f1 = f1_score(found)
    # windows on facades that were never reconstructed count as misses
    missed = sum(len(f.windows) for f in gt.facades if f.facade_id not in pred_wwr)
    unassoc_pred = sum(len(f.windows) for f in model.facades if f.facade_id not in assoc)
    total_ms = MatchSet(found.pairs, found.unmatched_pred + [None] * unassoc_pred, found.unmatched_gt + [None] * missed)
    tp_, tr_, tf1 = f1_score(total_ms)
    standard, total, imputed = wwr_errors(pred_wwr, {f.facade_id: f.wwr for f in gt.facades})

    return {
        "building_id": gt.building_id,
        "iou_threshold": iou_threshold,
        "facades": {
            "gt": len(gt.facades),
            "predicted": len(model.facades),
            "associated": len(per_facade),
            "missing": sorted(f.facade_id for f in gt.facades if f.facade_id not in pred_wwr),
        },
        "standard": {
            "tp": found.tp,
            "fp": found.fp,
            "fn": found.fn,
            "precision": p,
            "recall": r,
            "f1": f1,
            "mean_iou": _safe(mean_iou, found),
            "mean_abs_rel_area_err": _safe(mean_abs_rel_area_err, found),
            "mean_abs_pos_err": _safe(mean_abs_pos_err, found),
        },
        "total": {"tp": total_ms.tp, "fp": total_ms.fp, "fn": total_ms.fn, "precision": tp_, "recall": tr_, "f1": tf1},
        "wwr": {"standard": standard, "total": total, "imputed": imputed},
        "per_facade": per_facade,
    }


CSV_COLUMNS = (
    "building",
    "method",
    "f1",
    "mean_iou",
    "mean_abs_rel_area_err_pct",
    "mean_abs_pos_err_m",
    "wwr_error",
    "wwr_error_imputed",
)


def _fmt(v, scale=1.0):
    return "" if v is None else f"{v * scale:.4f}"


def report_csv(reports: Sequence[dict], method: str = "streetview") -> str:
    """One row per building plus a "total" row variant, like the summary table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rep in reports:
        s = rep["standard"]
        w.writerow(
            [
                rep["building_id"],
                method,
                _fmt(s["f1"]),
                _fmt(s["mean_iou"]),
                _fmt(s["mean_abs_rel_area_err"], 100.0),
                _fmt(s["mean_abs_pos_err"]),
                _fmt(rep["wwr"]["standard"]),
                _fmt(rep["wwr"]["imputed"]),
            ]
        )
        w.writerow([rep["building_id"], f"{method} (total)", _fmt(rep["total"]["f1"]), "", "", "", _fmt(rep["wwr"]["total"]), ""])
    return buf.getvalue()


def save_report(report: dict, out_dir, method: str = "streetview") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jp = out_dir / "eval_report.json"
    jp.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cp = out_dir / "eval_summary.csv"
    cp.write_text(report_csv([report], method))
    return jp, cp

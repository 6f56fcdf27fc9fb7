"""Window detections: file interface, multi-view fusion and single-view filtering."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, DomainError

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Detection:
    bbox: Box  # x_min, y_min, x_max, y_max in pixels
    score: float
    category_id: int = 1
    source_id: str = ""

    def __post_init__(self):
        b = tuple(float(c) for c in self.bbox)
        if len(b) != 4 or not (b[0] < b[2] and b[1] < b[3]):
            raise DomainError(f"invalid bbox {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise DomainError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "bbox", b)
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "category_id", int(self.category_id))

    def to_dict(self) -> dict:
        return {"source_id": self.source_id, "bbox": list(self.bbox), "score": self.score, "category_id": self.category_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(tuple(d["bbox"]), d["score"], d.get("category_id", 1), d.get("source_id", ""))


@dataclass(frozen=True)
class FusionConfig:
    tau_conf: float = 0.2
    tau_iou: float = 0.3
    n_min: int = 2
    tau_score2: float = 0.4
    count_distinct_sources: bool = False

    def __post_init__(self):
        for name in ("tau_conf", "tau_iou", "tau_score2"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.n_min < 1:
            raise ConfigError("n_min must be at least 1")


def iou(b1: Sequence[float], b2: Sequence[float]) -> float:
    ix = max(0.0, min(b1[2], b2[2]) - max(b1[0], b2[0]))
    iy = max(0.0, min(b1[3], b2[3]) - max(b1[1], b2[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    a1 = (b1[2] - b1[0]) * (b1[3] - b1[1])
    a2 = (b2[2] - b2[0]) * (b2[3] - b2[1])
    return inter / (a1 + a2 - inter)


def iou_matrix(boxes: np.ndarray, others: np.ndarray | None = None) -> np.ndarray:
    A = np.asarray(boxes, dtype=float).reshape(-1, 4)
    B = A if others is None else np.asarray(others, dtype=float).reshape(-1, 4)
    ix = np.clip(np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _sort_key(d: Detection):
    return (d.category_id, d.bbox, -d.score, d.source_id)


def cluster_by_iou(boxes, tau_iou: float) -> list[list[int]]:
    """Connected components of the graph joining boxes with IoU above ``tau_iou``."""
    n = len(boxes)
    if n == 0:
        return []
    adj = iou_matrix(np.asarray(boxes, dtype=float)) > tau_iou
    _, labels = connected_components(csr_matrix(adj), directed=False)
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return list(groups.values())


def merge_detections(members: Sequence[Detection]) -> Detection:
    """Median box per coordinate and mean of square-root scores."""
    boxes = np.array([d.bbox for d in members])
    score = float(np.mean([math.sqrt(d.score) for d in members]))
    return Detection(tuple(np.median(boxes, axis=0).tolist()), score, members[0].category_id, "fused")


def fuse_multiview(dets: Sequence[Detection], cfg: FusionConfig = FusionConfig()) -> list[Detection]:
    """Fuse per-view detections of one facade into consensus detections.

    The result is sorted by category and box, so it does not depend on the
    input order.
    """
    kept = sorted((d for d in dets if d.score >= cfg.tau_conf), key=_sort_key)
    out = []
    for cat in sorted({d.category_id for d in kept}):
        in_cat = [d for d in kept if d.category_id == cat]
        if len(in_cat) < 2 and cfg.n_min > 1:
            continue
        for idxs in cluster_by_iou([d.bbox for d in in_cat], cfg.tau_iou):
            members = [in_cat[i] for i in idxs]
            support = len({d.source_id for d in members}) if cfg.count_distinct_sources else len(members)
            if support < cfg.n_min:
                continue
            merged = merge_detections(members)
            if merged.score < cfg.tau_score2:
                continue
            out.append(merged)
    return sorted(out, key=_sort_key)


def filter_single_view(dets: Sequence[Detection], tau_conf: float = 0.2) -> list[Detection]:
    return [d for d in dets if d.score >= tau_conf]


# -- file interface ---------------------------------------------------------

def load_detections(path) -> dict[str, list[Detection]]:
    """Read a detections file; returns ``facade_id -> detections``.

    Accepts a single ``{"facade_id": ..., "detections": [...]}`` object or a
    list of them. Boxes in the upright PNG frame (``"frame": "png"``) are
    flipped into the grid frame using ``"image_height"``.
    """
    raw = json.loads(Path(path).read_text())
    docs = raw if isinstance(raw, list) else [raw]
    out: dict[str, list[Detection]] = {}
    for doc in docs:
        if "facade_id" not in doc or "detections" not in doc:
            raise ConfigError(f"{path}: each entry needs 'facade_id' and 'detections'")
        frame = doc.get("frame", "grid")
        dets = [Detection.from_dict(d) for d in doc["detections"]]
        if frame == "png":
            h = float(doc["image_height"])
            dets = [
                Detection((d.bbox[0], h - d.bbox[3], d.bbox[2], h - d.bbox[1]), d.score, d.category_id, d.source_id)
                for d in dets
            ]
        elif frame != "grid":
            raise ConfigError(f"{path}: unknown frame {frame!r}")
        out.setdefault(str(doc["facade_id"]), []).extend(dets)
    return out


def detections_document(facade_id: str, dets: Sequence[Detection]) -> dict:
    return {"facade_id": facade_id, "frame": "grid", "detections": [d.to_dict() for d in dets]}


def save_detections(path, docs: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps(list(docs), indent=2, sort_keys=True) + "\n")

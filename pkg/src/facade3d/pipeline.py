"""End-to-end orchestration with one persisted artifact per stage.

Every stage reads its inputs from the output directory and writes its
results back there, so running the stages one by one gives the same files
as :func:`run_pipeline`. JSON is written with sorted keys and no timing
data, which keeps reruns byte-identical.

Street-view branch::

    ingest -> cluster -> ortho -> align -> facade -> fuse -> model [-> eval]

Volume (``camera2d``) branch::

    ortho (ray-colour oracle) -> fuse (single-view filter) -> model [-> eval]
"""
from __future__ import annotations

import copy
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .alignment import align_group_report
from .clustering import cluster_planes, cluster_report, clusters_from_report
from .dataset import filter_same_date, load_manifest, select_origin_and_traverse, write_manifest
from .errors import ConfigError, Facade3DError, StageError
from .evaluation import evaluate, load_ground_truth, save_ground_truth, save_report
from .facade import (
    FacadeBox,
    build_reliable_set,
    crop_facades,
    detect_line_segments,
    integer_box,
    load_lines,
    ransac_facade,
    save_lines,
)
from .fusion import Detection, FusionConfig, detections_document, filter_single_view, fuse_multiview, load_detections
from .ortho import ConstantOracle, load_ortho, ortho_from_volume, ortho_per_segment, save_ortho
from .thermal import ThermalModel, assemble_model, bbox_to_world, load_model, make_facade, save_model, with_windows

logger = logging.getLogger(__name__)

STREETVIEW_STAGES = ("ingest", "cluster", "ortho", "align", "facade", "fuse", "model")
CAMERA2D_STAGES = ("ortho", "fuse", "model")

DEFAULTS: dict[str, Any] = {
    "data_source_type": "streetview",
    "seed": None,
    "workers": None,
    "paths": {"dataset": None, "detections": None, "lines": None, "ground_truth": None, "out": "out"},
    "selection": {"center": None, "radius": None, "same_date": True},
    "clustering": {"threshold": 1e-5},
    "ortho": {"pixel_size": 0.02, "extent": "minmax", "margin": 0.5, "max_incidence_deg": 85.0, "sampling": "bilinear"},
    "alignment": {"ratio": 0.75, "threshold": 2.0, "iterations": 500, "min_inlier_ratio": 0.5, "min_overlap": 0.1},
    "facade": {
        "axis_tol_deg": 10.0,
        "grad_percentile": 70.0,
        "min_length": 20.0,
        "offset_tol": 5.0,
        "span_overlap": 0.5,
        "min_images": 2,
        "iterations": 1000,
        "dbscan_eps": 15.0,
        "dbscan_min_samples": 2,
        "inside_tol": 3.0,
    },
    "fusion": {"tau_conf": 0.2, "tau_iou": 0.3, "n_min": 2, "tau_score2": 0.4},
    "detector": {"type": "oracle", "window_color": [30, 60, 110], "palette": "auto", "tol": 48.0},
    "volume": {"oracle": {"type": "synthetic", "rgba": None}, "facades": None, "samples_per_pixel": 1},
    "synth": None,
    "eval": {"iou_threshold": 0.5},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key '{path}{k}'")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _diff(base: dict, cur: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in cur.items():
        b = base.get(k)
        if isinstance(v, dict) and isinstance(b, dict) and b:
            out.update(_diff(b, v, f"{prefix}{k}."))
        elif v != b:
            out[f"{prefix}{k}"] = v
    return out


@dataclass(frozen=True)
class PipelineConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def workers(self) -> int:
        w = self.data["workers"]
        return int(w) if w else (os.cpu_count() or 1)

    @property
    def out(self) -> Path:
        return self._path(self.data["paths"]["out"])

    def _path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def path(self, key: str) -> Optional[Path]:
        v = self.data["paths"].get(key)
        if v is not None:
            return self._path(v)
        fallback = {"dataset": self.out / "dataset" / "dataset.json", "ground_truth": self.out / "ground_truth.json"}
        return fallback.get(key)

    def overrides(self) -> dict:
        """Parameters that differ from the defaults; file locations and worker count are left out."""
        return {k: v for k, v in _diff(DEFAULTS, self.data).items() if not k.startswith("paths.") and k != "workers"}

    def fusion(self) -> FusionConfig:
        return FusionConfig(**self.data["fusion"])


def make_config(data: Optional[dict] = None, base_dir=".", seed: Optional[int] = None, out=None) -> PipelineConfig:
    merged = _merge(DEFAULTS, data or {})
    if seed is not None:
        merged["seed"] = int(seed)
    if out is not None:
        merged["paths"]["out"] = str(out)
    cfg = PipelineConfig(merged, Path(base_dir))
    validate_config(cfg)
    return cfg


def load_config(path, seed: Optional[int] = None, out=None) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return make_config(data, path.parent, seed, out)


def validate_config(cfg: PipelineConfig) -> None:
    d = cfg.data
    if d["seed"] is None:
        raise ConfigError("'seed' is mandatory")
    if d["data_source_type"] not in ("streetview", "camera2d"):
        raise ConfigError("data_source_type must be 'streetview' or 'camera2d'")
    if not d["ortho"]["pixel_size"] > 0:
        raise ConfigError("ortho.pixel_size must be positive")
    if d["ortho"]["extent"] not in ("minmax", "percentile"):
        raise ConfigError("ortho.extent must be 'minmax' or 'percentile'")
    if not 0 < d["alignment"]["ratio"] <= 1:
        raise ConfigError("alignment.ratio must lie in (0, 1]")
    if not 0 <= d["alignment"]["min_inlier_ratio"] <= 1:
        raise ConfigError("alignment.min_inlier_ratio must lie in [0, 1]")
    if not 0 <= d["facade"]["grad_percentile"] <= 100:
        raise ConfigError("facade.grad_percentile must lie in [0, 100]")
    if not 0 < d["clustering"]["threshold"]:
        raise ConfigError("clustering.threshold must be positive")
    if d["workers"] is not None and int(d["workers"]) < 1:
        raise ConfigError("workers must be at least 1")
    if d["detector"]["type"] not in ("oracle", "file"):
        raise ConfigError("detector.type must be 'oracle' or 'file'")
    if d["detector"]["type"] == "file" and d["paths"]["detections"] is None:
        raise ConfigError("detector.type 'file' needs paths.detections (or use the oracle detector)")
    oc = d["volume"]["oracle"]
    if oc["type"] not in ("synthetic", "constant"):
        raise ConfigError("volume.oracle.type must be 'synthetic' or 'constant'")
    if oc["type"] == "constant" and (oc["rgba"] is None or len(oc["rgba"]) != 4):
        raise ConfigError("a constant volume oracle needs volume.oracle.rgba = [r, g, b, a]")
    cfg.fusion()  # range checks


# -- helpers ----------------------------------------------------------------

def _dump(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _read(path: Path):
    if not path.is_file():
        raise ConfigError(f"missing artifact {path}; run the earlier stages first")
    return json.loads(path.read_text())


def _pmap(fn: Callable, items, workers: int) -> list:
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _segment_file(key: str) -> str:
    return key.replace(":", "_") + ".png"


def synth_building(cfg: PipelineConfig):
    from .synthetic import generate_building

    return generate_building(synth_config(cfg))


def synth_config(cfg: PipelineConfig):
    from .synthetic import SynthConfig

    raw = dict(cfg["synth"] or {})
    raw.setdefault("seed", cfg.seed)
    for k in ("facade_width_range", "facade_height_range", "facade_size", "window_grid", "window_size",
              "window_width_range", "window_height_range", "wwr_range"):
        if raw.get(k) is not None:
            raw[k] = tuple(raw[k])
    if raw.get("occluders"):
        from .synthetic import Occluder

        raw["occluders"] = [Occluder(tuple(o["lo"]), tuple(o["hi"]), tuple(o.get("color", (60, 110, 50)))) for o in raw["occluders"]]
    try:
        return SynthConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad synth section: {exc}") from exc


def _window_detector(cfg: PipelineConfig):
    from .synthetic import oracle_window_detector

    det = cfg["detector"]
    palette = det["palette"]
    if palette == "auto":
        synthetic = cfg["synth"] is not None or (
            cfg["data_source_type"] == "camera2d" and cfg["volume"]["oracle"]["type"] == "synthetic"
        )
        palette = synth_building(cfg)[0].palette() if synthetic else None
    color = tuple(det["window_color"])

    def run(img):
        return oracle_window_detector(img, color, det["tol"], palette)

    return run


# -- stages: synthetic data -------------------------------------------------

def stage_synth(cfg: PipelineConfig) -> Path:
    """Render the synthetic dataset and its ground truth into the output directory.

    The volume branch never reads panoramas, so there only the ground truth is written.
    """
    from .synthetic import generate_dataset

    if cfg["data_source_type"] == "camera2d":
        return save_ground_truth(synth_building(cfg)[1], cfg.out / "ground_truth.json")
    manifest, _, gt = generate_dataset(synth_config(cfg))
    target = write_manifest(manifest, cfg.out / "dataset")
    save_ground_truth(gt, cfg.out / "ground_truth.json")
    return target


# -- stages: street-view branch ----------------------------------------------

def _selected_panos(cfg: PipelineConfig):
    sel = _read(cfg.out / "selection.json")
    manifest = load_manifest(cfg.path("dataset"))
    by_id = manifest.by_id()
    return manifest, [by_id[i] for i in sel["pano_ids"]]


def stage_ingest(cfg: PipelineConfig) -> Path:
    manifest = load_manifest(cfg.path("dataset"))
    s = cfg["selection"]
    if s["center"] is not None and s["radius"] is not None:
        panos = select_origin_and_traverse(manifest, s["center"], s["radius"])
    else:
        panos = list(manifest.panos)
    if s["same_date"]:
        panos = filter_same_date(panos)
    return _dump(
        cfg.out / "selection.json",
        {"dataset_id": manifest.dataset_id, "pano_ids": [p.pano_id for p in panos]},
    )


def stage_cluster(cfg: PipelineConfig) -> Path:
    _, panos = _selected_panos(cfg)
    clusters = cluster_planes(panos, cfg["clustering"]["threshold"])
    return _dump(cfg.out / "clusters.json", cluster_report(clusters))


def stage_ortho(cfg: PipelineConfig) -> Path:
    if cfg["data_source_type"] == "camera2d":
        return stage_volume_ortho(cfg)
    _, panos = _selected_panos(cfg)
    clusters = clusters_from_report(_read(cfg.out / "clusters.json"))
    o = cfg["ortho"]
    imgs = ortho_per_segment(
        clusters,
        panos,
        o["pixel_size"],
        workers=cfg.workers,
        extent=o["extent"],
        margin=o["margin"],
        sampling=o["sampling"],
        max_incidence_deg=o["max_incidence_deg"],
    )
    index = []
    for c in clusters:
        files = []
        for ref in c.members:
            if ref not in imgs:
                continue
            rel = f"ortho/c{c.cluster_id:03d}/{_segment_file(ref.key())}"
            save_ortho(imgs[ref], cfg.out / rel)
            files.append({"segment": ref.key(), "file": rel})
        index.append({"cluster_id": c.cluster_id, "images": files})
    return _dump(cfg.out / "ortho" / "index.json", {"clusters": index})


def stage_align(cfg: PipelineConfig) -> Path:
    index = _read(cfg.out / "ortho" / "index.json")
    a = cfg["alignment"]

    def run(entry):
        cid = entry["cluster_id"]
        images = [load_ortho(cfg.out / f["file"]) for f in entry["images"]]
        aligned, records = align_group_report(
            images,
            seed=cfg.seed * 1000 + cid,
            min_overlap=a["min_overlap"],
            threshold=a["threshold"],
            iterations=a["iterations"],
            ratio=a["ratio"],
            min_inlier_ratio=a["min_inlier_ratio"],
        )
        files = []
        for im in aligned:
            rel = f"aligned/c{cid:03d}/{_segment_file(im.source_id)}"
            save_ortho(im, cfg.out / rel)
            files.append(rel)
        return {"cluster_id": cid, "records": [r.to_dict() for r in records], "images": files}

    return _dump(cfg.out / "alignment_report.json", {"clusters": _pmap(run, index["clusters"], cfg.workers)})


def stage_facade(cfg: PipelineConfig) -> Path:
    report = _read(cfg.out / "alignment_report.json")
    f = cfg["facade"]
    supplied = load_lines(cfg.path("lines")) if cfg.path("lines") else {}

    def run(entry):
        cid = entry["cluster_id"]
        fid = f"c{cid:03d}"
        images = [load_ortho(cfg.out / p) for p in entry["images"]]
        lines = [
            supplied[im.source_id]
            if im.source_id in supplied
            else detect_line_segments(im, f["grad_percentile"], f["min_length"])
            for im in images
        ]
        rec = {"cluster_id": cid, "facade_id": fid, "lines": {im.source_id: [s.to_list() for s in ls] for im, ls in zip(images, lines)}}
        try:
            reliable = build_reliable_set(lines, f["offset_tol"], f["span_overlap"], f["min_images"], f["axis_tol_deg"])
            box, winners = ransac_facade(
                images,
                reliable,
                f["iterations"],
                seed=cfg.seed * 1000 + cid,
                per_image_lines=lines,
                eps=f["dbscan_eps"],
                min_samples=f["dbscan_min_samples"],
                inside_tol=f["inside_tol"],
            )
            crops = crop_facades(images, box)
        except Facade3DError as exc:
            logger.warning("facade %s skipped: %s", fid, exc)
            rec.update(status="skipped", reason=f"{type(exc).__name__}: {exc}")
            return rec
        files = []
        for im in crops:
            rel = f"crops/{fid}/{_segment_file(im.source_id)}"
            save_ortho(im, cfg.out / rel)
            files.append(rel)
        rec.update(
            status="ok",
            box=box.to_dict(),
            crop_box=list(integer_box(box)),
            candidates=[w.to_dict() for w in winners],
            reliable_lines=len(reliable),
            images=files,
        )
        return rec

    results = _pmap(run, report["clusters"], cfg.workers)
    save_lines(cfg.out / "lines.json", {k: v for r in results for k, v in _segments(r.pop("lines")).items()})
    return _dump(cfg.out / "facades.json", {"facades": results})


def _segments(doc: dict):
    from .facade import LineSegment

    return {k: [LineSegment((s[0], s[1]), (s[2], s[3])) for s in v] for k, v in doc.items()}


def _facade_entries(cfg: PipelineConfig) -> list[dict]:
    if cfg["data_source_type"] == "camera2d":
        return _read(cfg.out / "volume" / "index.json")["facades"]
    return [f for f in _read(cfg.out / "facades.json")["facades"] if f["status"] == "ok"]


def stage_fuse(cfg: PipelineConfig) -> Path:
    """Window detections per view, then multi-view fusion (single-view filter for volumes)."""
    entries = _facade_entries(cfg)
    from_file = cfg["detector"]["type"] == "file"
    supplied = load_detections(cfg.path("detections")) if from_file else {}
    detector = None if from_file else _window_detector(cfg)
    fcfg = cfg.fusion()
    camera2d = cfg["data_source_type"] == "camera2d"

    def run(entry):
        fid = entry["facade_id"]
        images = [load_ortho(cfg.out / p) for p in entry["images"]]
        if from_file:
            raw = list(supplied.get(fid, []))
        else:
            raw = [d for im in images for d in detector(im)]
        if camera2d:
            kept = filter_single_view(raw, fcfg.tau_conf)
        else:
            kept = fuse_multiview(raw, fcfg)
        return detections_document(fid, raw), detections_document(fid, kept)

    results = _pmap(run, entries, cfg.workers)
    _dump(cfg.out / "detections_raw.json", [r[0] for r in results])
    return _dump(cfg.out / "fused.json", [r[1] for r in results])


def stage_model(cfg: PipelineConfig) -> Path:
    entries = _facade_entries(cfg)
    fused = {d["facade_id"]: [Detection.from_dict(x) for x in d["detections"]] for d in _read(cfg.out / "fused.json")}
    facades, clipped = [], 0
    for entry in entries:
        fid = entry["facade_id"]
        img = load_ortho(cfg.out / entry["images"][0])
        box = entry["box"]["bbox"] if "box" in entry else [0.0, 0.0, float(img.width), float(img.height)]
        fm = make_facade(fid, img.plane, img.basis, box, img.grid_origin2d, img.width, img.height, img.pixel_size)
        windows = []
        for det in fused.get(fid, []):
            x0, y0, x1, y1 = det.bbox
            c = (max(x0, 0.0), max(y0, 0.0), min(x1, float(img.width)), min(y1, float(img.height)))
            if c != det.bbox:
                clipped += 1
            if c[2] <= c[0] or c[3] <= c[1]:
                continue
            windows.append(bbox_to_world(Detection(c, det.score, det.category_id, det.source_id), fm))
        facades.append(with_windows(fm, windows))

    if cfg["data_source_type"] == "camera2d":
        building_id, footprint, note = f"volume-{cfg.seed}", None, "ray-colour oracle frame, metres"
    else:
        manifest = load_manifest(cfg.path("dataset"))
        building_id, footprint, note = manifest.dataset_id, manifest.footprint, manifest.frame_origin
    model = assemble_model(
        facades,
        footprint=footprint,
        building_id=building_id,
        frame_note=note,
        source=cfg["data_source_type"],
        properties={"pixel_size": cfg["ortho"]["pixel_size"], "config_overrides": cfg.overrides(), "clipped_windows": clipped},
    )
    return save_model(model, cfg.out / "model.json")


def stage_eval(cfg: PipelineConfig) -> Path:
    gt_path = cfg.path("ground_truth")
    if gt_path is None or not gt_path.is_file():
        raise ConfigError(f"ground truth not found: {gt_path}")
    model = load_model(cfg.out / "model.json")
    report = evaluate(model, load_ground_truth(gt_path), cfg["eval"]["iou_threshold"])
    report["config_overrides"] = cfg.overrides()
    return save_report(report, cfg.out, method=cfg["data_source_type"])[0]


# -- stages: volume branch --------------------------------------------------

def _volume_setup(cfg: PipelineConfig):
    v = cfg["volume"]
    oc = v["oracle"]
    facades = v["facades"]
    if oc["type"] == "constant":
        oracle = ConstantOracle(oc["rgba"])
    elif oc["type"] == "synthetic":
        from .synthetic import SceneRayOracle

        building, _ = synth_building(cfg)
        oracle = SceneRayOracle(building)
        if facades is None:
            facades = []
            for k, f in enumerate(building.facades):
                u0, v0, u1, v1 = f.extent
                corners = f.basis.to_world(np.array([[u0, v0], [u1, v0], [u0, v1]]))
                facades.append({"facade_id": f"v{k}", "corners": corners.tolist()})
    else:  # rejected by validate_config
        raise ConfigError(f"unknown volume oracle type {oc['type']!r}")
    if not facades:
        raise ConfigError("volume.facades must list facade corners")
    return oracle, facades


def stage_volume_ortho(cfg: PipelineConfig) -> Path:
    oracle, facades = _volume_setup(cfg)
    s = cfg["ortho"]["pixel_size"]

    def run(f):
        img = ortho_from_volume(oracle, f["corners"], s, cfg["volume"]["samples_per_pixel"], f["facade_id"])
        rel = f"volume/{f['facade_id']}.png"
        save_ortho(img, cfg.out / rel)
        return {"facade_id": f["facade_id"], "corners": [list(map(float, c)) for c in f["corners"]], "images": [rel]}

    return _dump(cfg.out / "volume" / "index.json", {"facades": _pmap(run, facades, cfg.workers)})


# -- orchestration ----------------------------------------------------------

STAGES: dict[str, Callable[[PipelineConfig], Path]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "cluster": stage_cluster,
    "ortho": stage_ortho,
    "align": stage_align,
    "facade": stage_facade,
    "fuse": stage_fuse,
    "model": stage_model,
    "eval": stage_eval,
}


def run_stage(name: str, cfg: PipelineConfig) -> Path:
    """Run one stage; failures are re-raised as :class:`StageError`."""
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    if cfg["data_source_type"] == "camera2d" and name in ("ingest", "cluster", "align", "facade"):
        raise ConfigError(f"stage '{name}' is not part of the camera2d branch")
    cfg.out.mkdir(parents=True, exist_ok=True)
    try:
        return STAGES[name](cfg)
    except StageError:
        raise
    except (Facade3DError, OSError, ValueError, KeyError) as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: PipelineConfig, evaluate_model: Optional[bool] = None) -> ThermalModel:
    """Run every stage of the configured branch and return the model.

    A config with a ``synth`` section and no dataset (ground truth for the
    volume branch) renders its synthetic scene first. Evaluation runs when
    ground truth is available, unless ``evaluate_model`` says otherwise.
    """
    camera2d = cfg["data_source_type"] == "camera2d"
    stages = list(CAMERA2D_STAGES if camera2d else STREETVIEW_STAGES)
    synthesise = cfg["synth"] is not None and cfg["paths"]["ground_truth" if camera2d else "dataset"] is None
    if synthesise:
        stages.insert(0, "synth")
    gt = cfg.path("ground_truth")
    if evaluate_model or (evaluate_model is None and (synthesise or (gt is not None and gt.is_file()))):
        stages.append("eval")
    for name in stages:
        logger.info("stage %s", name)
        run_stage(name, cfg)
    skipped = []
    if not camera2d:
        skipped = [
            {"facade_id": f["facade_id"], "reason": f["reason"]}
            for f in _read(cfg.out / "facades.json")["facades"]
            if f["status"] != "ok"
        ]
    _dump(
        cfg.out / "run_report.json",
        {"stages": stages, "config": cfg.data, "config_overrides": cfg.overrides(), "skipped_facades": skipped},
    )
    return load_model(cfg.out / "model.json")

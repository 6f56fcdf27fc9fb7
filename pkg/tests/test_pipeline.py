import json
import shutil

import pytest

from facade3d.cli import main
from facade3d.errors import ConfigError, StageError
from facade3d.fusion import Detection, detections_document, save_detections
from facade3d.pipeline import STREETVIEW_STAGES, load_config, make_config, run_pipeline, run_stage
from facade3d.thermal import load_model

WALL = [[0.0, 0.0, 0.0], [4.0, 0.0, 0.0], [0.0, 0.0, 3.0]]


def write_config(path, data):
    path.write_text(json.dumps(data))
    return path


def constant_volume(tmp_path, **extra):
    data = {
        "seed": 0,
        "data_source_type": "camera2d",
        "volume": {"oracle": {"type": "constant", "rgba": [200, 200, 200, 255]}, "facades": [{"facade_id": "w", "corners": WALL}]},
        "detector": {"palette": None},
        "paths": {"out": "out"},
    }
    data.update(extra)
    return make_config(data, base_dir=tmp_path)


def test_streetview_run_writes_model(synthetic_runs):
    out, _ = synthetic_runs(1)
    model = load_model(out / "model.json")
    assert len(model.facades) == 4
    assert all(f.windows and 0 < f.wwr < 1 for f in model.facades)
    report = json.loads((out / "run_report.json").read_text())
    assert report["stages"] == ["synth", *STREETVIEW_STAGES, "eval"]
    assert report["skipped_facades"] == []


def test_one_cluster_per_facade(synthetic_runs):
    out, _ = synthetic_runs(1)
    clusters = json.loads((out / "clusters.json").read_text())["clusters"]
    gt = json.loads((out / "ground_truth.json").read_text())
    assert len(clusters) == len(gt["facades"])


def test_constant_volume_without_windows_has_zero_wwr(tmp_path):
    model = run_pipeline(constant_volume(tmp_path))
    assert [f.facade_id for f in model.facades] == ["w"]
    assert model.facades[0].wwr == 0.0 and model.facades[0].windows == ()
    assert model.facades[0].width_m == pytest.approx(4.0) and model.facades[0].height_m == pytest.approx(3.0)


def test_synthetic_volume_branch_matches_ground_truth(tmp_path):
    cfg = make_config({"seed": 3, "data_source_type": "camera2d", "synth": {}}, base_dir=tmp_path, out="vol")
    run_pipeline(cfg)
    rep = json.loads((cfg.out / "eval_report.json").read_text())
    assert rep["standard"]["f1"] == 1.0 and rep["facades"]["associated"] == 4
    assert max(abs(p["wwr_error"]) for p in rep["per_facade"]) < 0.01


def test_file_detector_needs_a_detections_path(tmp_path):
    with pytest.raises(ConfigError):
        make_config({"seed": 0, "detector": {"type": "file"}}, base_dir=tmp_path)
    with pytest.raises(ConfigError):
        make_config({"seed": 0, "bogus": 1}, base_dir=tmp_path)
    with pytest.raises(ConfigError):
        make_config({}, base_dir=tmp_path)


def test_low_confidence_detections_are_all_dropped(tmp_path):
    dets = [Detection((10, 10, 40, 60), 0.1, 1, "w"), Detection((60, 10, 90, 60), 0.15, 1, "w")]
    save_detections(tmp_path / "dets.json", [detections_document("w", dets)])
    cfg = constant_volume(tmp_path, detector={"type": "file"}, paths={"out": "out", "detections": "dets.json"})
    run_stage("ortho", cfg)
    fused = json.loads(run_stage("fuse", cfg).read_text())
    assert [d["facade_id"] for d in fused] == ["w"] and fused[0]["detections"] == []
    raw = json.loads((cfg.out / "detections_raw.json").read_text())
    assert len(raw[0]["detections"]) == 2


def test_stages_one_by_one_reproduce_the_full_run(synthetic_runs, tmp_path):
    ref, _ = synthetic_runs(1)
    shutil.copytree(ref / "dataset", tmp_path / "dataset")
    shutil.copy(ref / "ground_truth.json", tmp_path / "gt.json")
    data = {"seed": 1, "synth": {}, "paths": {"dataset": "dataset/dataset.json", "ground_truth": "gt.json", "out": "staged"}}
    cfg = make_config(data, base_dir=tmp_path)
    for name in (*STREETVIEW_STAGES, "eval"):
        run_stage(name, cfg)
    for name in ("model.json", "eval_report.json", "fused.json", "facades.json"):
        assert (cfg.out / name).read_bytes() == (ref / name).read_bytes(), name


def test_supplied_lines_are_used_verbatim(synthetic_runs, tmp_path):
    ref, _ = synthetic_runs(1)
    work = tmp_path / "run"
    shutil.copytree(ref, work)
    sources = json.loads((ref / "lines.json").read_text())["images"]
    mine = {k: [] for k in sources}
    first = sorted(sources)[0]
    mine[first] = [[5.0, 5.0, 5.0, 80.0], [1.5, 2.5, 60.25, 2.5]]
    (tmp_path / "lines.json").write_text(json.dumps({"images": mine}))
    cfg = make_config({"seed": 1, "synth": {}, "paths": {"lines": "lines.json", "dataset": "run/dataset/dataset.json"}}, base_dir=tmp_path, out=work)
    run_stage("facade", cfg)
    assert json.loads((work / "lines.json").read_text())["images"] == mine
    facades = json.loads((work / "facades.json").read_text())["facades"]
    assert all(f["status"] == "skipped" and f["reason"].startswith("InsufficientStructure") for f in facades)
    run_stage("fuse", cfg)
    with pytest.raises(StageError) as err:
        run_stage("model", cfg)
    assert err.value.stage == "model"


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 3
    cam = write_config(tmp_path / "cam.json", {"seed": 0, "data_source_type": "camera2d", "volume": {"oracle": {"type": "constant", "rgba": [9, 9, 9, 255]}, "facades": [{"facade_id": "w", "corners": WALL}]}})
    assert main(["align", "--config", str(cam)]) == 3
    assert main(["eval", "--config", str(cam)]) == 3
    sv = write_config(tmp_path / "sv.json", {"seed": 0, "paths": {"dataset": "nowhere/dataset.json"}})
    assert main(["ingest", "--config", str(sv)]) == 6
    capsys.readouterr()
    assert main(["ortho", "--config", str(cam), "--out", str(tmp_path / "o")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "o" / "volume" / "index.json")
    assert load_config(cam, seed=5).seed == 5

import datetime as dt
import time

import numpy as np
import pytest

from facade3d.dataset import ASSOC_COLS, ASSOC_ROWS, DatasetManifest, PanoRecord, PlaneAssocMatrix
from facade3d.geometry import PanoPose, Plane
from facade3d.pipeline import make_config, run_pipeline


def make_pano(pano_id, position=(0.0, 0.0, 2.5), date="2023-06-01", planes=(), assoc=None, neighbors=(), heading=0.0):
    idx = np.full((ASSOC_ROWS, ASSOC_COLS), -1, dtype=np.int64) if assoc is None else np.asarray(assoc)
    return PanoRecord(
        pano_id=pano_id,
        width=ASSOC_COLS,
        height=ASSOC_ROWS,
        pose=PanoPose(position, heading),
        capture_date=dt.date.fromisoformat(date),
        planes=[p if isinstance(p, Plane) else Plane.from_coeffs(*p) for p in planes],
        assoc=PlaneAssocMatrix(idx),
        neighbor_ids=list(neighbors),
        pixels=np.full((ASSOC_ROWS, ASSOC_COLS, 3), 128, dtype=np.uint8),
    )


def make_manifest(panos, dataset_id="test"):
    return DatasetManifest(dataset_id=dataset_id, panos=list(panos))


class SyntheticRuns:
    """Full synthetic pipeline runs, each executed at most once per session."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def __call__(self, seed, workers=1, tag=""):
        key = (seed, workers, tag)
        if key not in self.cache:
            out = self.root / f"seed{seed}-w{workers}{tag}"
            cfg = make_config({"seed": seed, "workers": workers, "synth": {}}, base_dir=self.root, out=out)
            t0 = time.perf_counter()
            run_pipeline(cfg)
            self.cache[key] = (out, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def synthetic_runs(tmp_path_factory):
    return SyntheticRuns(tmp_path_factory.mktemp("runs"))

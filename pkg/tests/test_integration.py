"""Whole-pipeline properties read off the session runs' outputs."""

from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest

from isorect import pipeline as P
from isorect.geometry import read_obj
from isorect.pipeline import read_diagnostics
from isorect.pointcloud import load_cloud, normalize_cloud
from isorect.synth import PRESETS, read_scene, sample_scene

ISO_PER_AREA = 1e-6
ROUND_ITER_BAND = (5, 60)


def _rounds(run):
    by_round = defaultdict(list)
    for row in read_diagnostics(run.out / "diag.csv"):
        by_round[int(row["round"])].append(row)
    return by_round


def _normalized_area(run):
    scene = read_scene(run.bundle / "scene.txt")
    s = normalize_cloud(load_cloud(run.bundle / "cloud.xyz")).scale
    return scene.width * scene.height * s * s


def test_full_run_schedule(single_fold_run):
    rounds = _rounds(single_fold_run)
    assert sorted(rounds) == [0, 1, 2, 3, 4]
    lam = {r: float(rows[0]["lambda_line"]) for r, rows in rounds.items()}
    assert lam == {0: 0.0, 1: 1.0, 2: 4.0, 3: 16.0, 4: 64.0}
    assert all(rows[0]["lambda_line"] == rows[0]["lambda_ray"] for rows in rounds.values())
    assert read_obj(single_fold_run.out / "space.obj", planar=False).dims == (153, 233)


def test_refinement_decreases_F(single_fold_run):
    f = [float(r["F"]) for r in _rounds(single_fold_run)[0]]
    assert np.all(np.diff(f) < 0)


def test_feature_free_run_reaches_isometry(single_fold_plain):
    assert single_fold_plain.code == 0
    rows = read_diagnostics(single_fold_plain.out / "diag.csv")
    assert all(int(r["n_lines"]) == 0 for r in rows)
    assert float(rows[-1]["iso"]) < ISO_PER_AREA * _normalized_area(single_fold_plain)


@pytest.mark.xfail(reason="the eps stopping test ends the coarse round early; see the decisions ledger", strict=False)
def test_iso_after_refinement_on_clean_fold():
    scene = replace(PRESETS["single-fold"](), sigma=0.0)
    s = sample_scene(scene, render_image=False)
    cloud = normalize_cloud(s.cloud)
    cfg = P.PipelineConfig()
    pair = P.initialize(P.PipelineInputs(s.cloud, scene.camera, [], scene.image_size), cfg, cloud)
    diag = []
    P.refine_initial(pair, P._Context(cloud, scene.camera, [], cfg), cfg.schedule, diag, [])
    assert diag[-1]["iso"] < ISO_PER_AREA * scene.width * scene.height * cloud.scale ** 2


@pytest.mark.xfail(reason="points near the cutoff keep flipping; see the decisions ledger", strict=False)
def test_valid_count_settles_on_outlier_scene(outlier_run):
    # equal counts are necessary for an unchanged mask
    counts = [int(r["n_valid"]) for r in _rounds(outlier_run)[0]]
    assert counts[-1] == counts[-2]


def test_iteration_counts(single_fold_run, two_fold_features, outlier_run):
    counts = [len(rows) for run in (single_fold_run, two_fold_features, outlier_run)
              for rows in _rounds(run).values()]
    assert all(2 <= c <= 100 for c in counts)
    lo, hi = ROUND_ITER_BAND
    assert lo <= np.median(counts) <= hi

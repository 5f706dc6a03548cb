import numpy as np
import pytest

from isorect.camera import CameraIntrinsics, project, viewing_rays
from isorect.energies import iso_residuals
from isorect.geometry import obb_of_points
from isorect.synth import (PRESETS, Crease, FoldMap, SceneError, SynthScene, boundary_lines, format_scene,
                           ground_truth_pair, parse_scene, sample_scene, texture_lines, write_bundle)


def two_fold(seed=0, **kw):
    rng = np.random.default_rng(seed)
    a1, a2 = rng.uniform(20, 80), -rng.uniform(20, 80)
    return SynthScene(creases=[Crease((0.3, 0.0), (0.35, 1.414), a1), Crease((0.7, 0.0), (0.66, 1.414), a2)],
                      rotation=tuple(rng.uniform(-15, 15, 3)), distance=2.0, seed=seed, **kw)


def test_zero_angles_give_rigid_pose():
    scene = SynthScene(creases=[Crease((0.5, 0), (0.5, 1.414), 0.0)], rotation=(10, 20, 5))
    flat = SynthScene(rotation=(10, 20, 5))
    rng = np.random.default_rng(0)
    xy = rng.uniform([0, 0], [1, 1.414], size=(200, 2))
    assert np.allclose(FoldMap(scene).embed(xy), FoldMap(flat).embed(xy), atol=1e-12)
    e = FoldMap(flat).embed(xy)
    d2 = np.linalg.norm(xy[:, None] - xy[None], axis=-1)
    d3 = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert np.abs(d2 - d3).max() < 1e-12


def test_single_fold_shortens_straddling_chords():
    fm = FoldMap(PRESETS["single-fold"]())
    p, q = np.array([[0.3, 0.7]]), np.array([[0.8, 0.7]])
    assert np.linalg.norm(fm.embed(p) - fm.embed(q)) < np.linalg.norm(p - q) - 1e-3


def _geodesic_lengths(fm, p, q):
    """Length on the folded sheet of the plane segments p-q: split at every crease crossing, embed, sum."""
    n, c = np.array(fm.normals), np.array(fm.offsets)
    dp, dq = p @ n.T - c, q @ n.T - c
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dp * dq < 0, dp / (dp - dq), np.nan)
    t = np.sort(np.column_stack([np.zeros(len(p)), t, np.ones(len(p))]), axis=1)
    total = np.zeros(len(p))
    for k in range(t.shape[1] - 1):
        t0, t1 = t[:, k], t[:, k + 1]
        ok = np.isfinite(t0) & np.isfinite(t1)
        a = fm.embed(p[ok] + t0[ok, None] * (q[ok] - p[ok]))
        b = fm.embed(p[ok] + t1[ok, None] * (q[ok] - p[ok]))
        total[ok] += np.linalg.norm(b - a, axis=1)
    return total


@pytest.mark.parametrize("seed", range(4))
def test_two_fold_preserves_edge_lengths(seed):
    scene = two_fold(seed)
    fm = FoldMap(scene)
    g = ground_truth_pair(scene, (41, 57)).plane.grid()
    for p, q in ((g[:-1], g[1:]), (g[:, :-1], g[:, 1:])):
        p, q = p.reshape(-1, 2), q.reshape(-1, 2)
        assert np.abs(_geodesic_lengths(fm, p, q) - np.linalg.norm(q - p, axis=1)).max() < 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_ground_truth_pair_iso_residuals(seed):
    scene = two_fold(seed)
    pair = ground_truth_pair(scene, (20, 30))
    per_face = (iso_residuals(pair) ** 2).sum(axis=1)
    # faces cut by a crease are bent, so only faces on one side are exactly isometric
    fm = FoldMap(scene)
    corners = pair.plane.vertices[pair.plane.faces()]
    masks = fm.region_masks(corners.reshape(-1, 2)).reshape(len(corners), 4, -1)
    flat_faces = np.all(masks == masks[:, :1], axis=(1, 2))
    assert flat_faces.sum() > 0.8 * len(flat_faces)
    assert per_face[flat_faces].max() < 1e-12


def test_positive_depth_and_crossing_creases():
    fm = FoldMap(two_fold(1))
    assert np.all(fm.embed(np.random.default_rng(0).uniform([0, 0], [1, 1.414], (500, 2)))[:, 2] > 0)
    with pytest.raises(SceneError):
        FoldMap(SynthScene(creases=[Crease((0, 0), (1, 1.414), 30), Crease((1, 0), (0, 1.414), 30)]))


def test_clean_sample_lies_on_surface():
    scene = SynthScene(creases=[Crease((0.5, 0), (0.5, 1.414), 60)], sigma=0.0, n_points=800)
    s = sample_scene(scene, render_image=False)
    assert np.all(s.labels == 1)
    px = project(scene.camera, s.cloud.points)
    back = FoldMap(scene).embed(FoldMap(scene).cast(viewing_rays(scene.camera, px)))
    assert np.abs(back - s.cloud.points).max() < 1e-9


def test_outlier_counts():
    s = sample_scene(PRESETS["single-fold-outliers"](), render_image=False)
    assert len(s.cloud) == 6000
    assert (s.labels == 1).sum() == 5000 and (s.labels == 0).sum() == 1000


def test_segments_relift_onto_their_source_lines():
    scene = two_fold(2)
    s = sample_scene(scene, render_image=False)
    sources = boundary_lines(scene) + texture_lines(scene)
    fm = FoldMap(scene)
    assert len(s.segments) > len(sources)  # creases split lines
    for seg, lid in zip(s.segments, s.segment_line_ids):
        a, b = sources[lid]
        xy = fm.cast(viewing_rays(scene.camera, seg.pixels))
        ok = np.isfinite(xy[:, 0])
        assert ok.mean() > 0.9
        d = (xy[ok] - a) @ np.array([-(b - a)[1], (b - a)[0]]) / np.linalg.norm(b - a)
        assert np.abs(d).max() < 1e-6
        assert obb_of_points(xy[ok]).straightness < 1e-9


def test_same_seed_same_sample():
    a = sample_scene(two_fold(3, n_points=300), render_image=False)
    b = sample_scene(two_fold(3, n_points=300), render_image=False)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.segments, b.segments))


def test_scene_text_round_trip():
    scene = two_fold(4, outliers=12, texture="checker")
    back = parse_scene(format_scene(scene))
    assert format_scene(back) == format_scene(scene)
    with pytest.raises(SceneError):
        parse_scene("widht 2\n")
    with pytest.raises(SceneError):
        parse_scene("texture marble\n")


def test_bundle_files(tmp_path):
    scene = SynthScene(n_points=200, image_size=(80, 120), camera=CameraIntrinsics(1.0, 110.0, 110.0, 40.0, 60.0))
    out = write_bundle(scene, tmp_path / "b")
    for name in ("cloud.xyz", "labels.txt", "cam.txt", "segments.txt", "segment_ids.txt", "ref.png", "scene.txt"):
        assert (out / name).exists()

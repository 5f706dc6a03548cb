"""Metrics of a recovered mesh pair against a synthetic scene's ground truth."""

from __future__ import annotations

import numpy as np

from .camera import MeshRayCaster, project, viewing_rays
from .energies import iso_residuals
from .geometry import MeshPair, barycentric_eval, obb_of_points
from .rectify import displacement_error
from .synth import FoldMap, SynthScene, texture_lines

LINE_SAMPLES = 400


def vertex_truth(scene: SynthScene, pair: MeshPair, fold: FoldMap | None = None) -> np.ndarray:
    """Ground-truth plane position seen through each recovered 3D vertex (NaN where the ray misses the sheet)."""
    fold = fold or FoldMap(scene)
    sp = pair.space.vertices
    front = sp[:, 2] > 0
    out = np.full((len(sp), 2), np.nan)
    if front.any():
        px = project(scene.camera, sp[front])
        out[front] = fold.cast(viewing_rays(scene.camera, px))
    return out


def scene_displacement_error(scene: SynthScene, pair: MeshPair, fold: FoldMap | None = None):
    """``(error, n_compared)``: flat-layout error over vertices whose rays hit the sheet."""
    truth = vertex_truth(scene, pair, fold)
    ok = np.isfinite(truth[:, 0])
    return displacement_error(pair.plane.vertices, np.nan_to_num(truth), scene.diagonal, ok), int(ok.sum())


def rendered_line_straightness(scene: SynthScene, pair: MeshPair, fold: FoldMap | None = None) -> list[float]:
    """OBB h/w of every texture line after mapping it through the recovered meshes.

    Each ground-truth line is sampled in the plane, imaged by the true camera,
    lifted onto the recovered 3D mesh and read off on the recovered flattening,
    which is exactly where the rectified image draws it.
    """
    fold = fold or FoldMap(scene)
    caster = MeshRayCaster(pair.space)
    out = []
    for a, b in texture_lines(scene):
        t = np.linspace(0.0, 1.0, LINE_SAMPLES)
        pts = a + t[:, None] * (b - a)
        px = project(scene.camera, fold.embed(pts))
        anchors, _, hit = caster.cast(viewing_rays(scene.camera, px))
        if hit.sum() < 2:
            out.append(float("nan"))
            continue
        out.append(obb_of_points(barycentric_eval(pair.plane, anchors[np.flatnonzero(hit)])).straightness)
    return out


def evaluate_scene(scene: SynthScene, pair: MeshPair, valid=None, labels=None) -> dict:
    """All metrics as a JSON-ready dict (``pair`` in the scene's units)."""
    fold = FoldMap(scene)
    disp, n = scene_displacement_error(scene, pair, fold)
    lines = rendered_line_straightness(scene, pair, fold)
    finite = [v for v in lines if np.isfinite(v)]
    metrics = {
        "displacement_error": disp,
        "vertices_compared": n,
        "line_straightness": [None if not np.isfinite(v) else v for v in lines],
        "worst_line_straightness": max(finite) if finite else None,
        "mean_line_straightness": float(np.mean(finite)) if finite else None,
        "iso_residual_mean": float(np.abs(iso_residuals(pair)).mean()),
    }
    if valid is not None and labels is not None:
        valid = np.asarray(valid, dtype=bool)
        labels = np.asarray(labels)
        inl = labels == 1
        metrics["inliers_valid"] = float(valid[inl].mean()) if inl.any() else None
        metrics["outliers_invalid"] = float((~valid[~inl]).mean()) if (~inl).any() else None
    return metrics

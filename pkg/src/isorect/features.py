"""Feature segments in the reference image and the straight feature lines built from them.

Segments arrive as pixel polylines.  Every inner iteration they are lifted
onto the current 3D mesh by ray casting, carried to the planar mesh through
their barycentric anchors, merged into lines, and fitted with a straight line
``cos θ x + sin θ y = c``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .camera import CameraIntrinsics, MeshRayCaster, ViewingRays, viewing_rays
from .geometry import Anchors, MeshPair, QuadMesh, TriangleGrid, barycentric_eval, locate_points, obb_of_points

log = logging.getLogger(__name__)

CLASSES = ("boundary", "text", "edge")
MAX_POINTS_PER_SEGMENT = 50
STRAIGHTNESS_TOL = 0.1
AXIS_TOL_DEG = 20.0
ENDPOINT_TOL_FACTOR = 1.5


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSegment:
    cls: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise FeatureError(f"unknown feature class {self.cls!r}")
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if len(self.pixels) < 2:
            raise FeatureError("a feature segment needs at least two pixels")


@dataclass
class FeatureLine:
    cls: str
    anchors: Anchors
    rays: ViewingRays
    theta: float = 0.0
    offset: float = 0.0
    orientation: str = "boundary"
    sources: tuple = ()

    def __len__(self) -> int:
        return len(self.anchors)

    def plane_points(self, plane: QuadMesh) -> np.ndarray:
        return barycentric_eval(plane, self.anchors)

    @property
    def normal(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])


def resample_polyline(pixels: np.ndarray, max_points: int = MAX_POINTS_PER_SEGMENT,
                      spacing: float = 5.0) -> np.ndarray:
    """Arc-length resampling to roughly one point per ``spacing`` pixels, capped at ``max_points``."""
    seg = np.linalg.norm(np.diff(pixels, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    if length == 0:
        return pixels[:1].copy()
    n = int(np.clip(round(length / spacing) + 1, 2, max_points))
    t = np.linspace(0.0, length, n)
    return np.column_stack([np.interp(t, s, pixels[:, 0]), np.interp(t, s, pixels[:, 1])])


def lift_segments(segments: list[FeatureSegment], cam: CameraIntrinsics, pair: MeshPair,
                  caster: MeshRayCaster | None = None,
                  max_points: int = MAX_POINTS_PER_SEGMENT) -> list[FeatureLine]:
    """Intersect each segment's pixel rays with the 3D mesh; misses are dropped."""
    if caster is None:
        caster = MeshRayCaster(pair.space)
    samples = [resample_polyline(s.pixels, max_points) for s in segments]
    if not samples:
        return []
    counts = [len(p) for p in samples]
    rays = viewing_rays(cam, np.concatenate(samples))
    anchors, _, hit = caster.cast(rays)
    lines = []
    start = 0
    for k, (seg, n) in enumerate(zip(segments, counts)):
        sl = slice(start, start + n)
        start += n
        keep = np.flatnonzero(hit[sl]) + sl.start
        if len(keep) < 2:
            log.warning("feature segment %d (%s) dropped: %d of %d pixels hit the mesh", k, seg.cls, len(keep), n)
            continue
        lines.append(FeatureLine(seg.cls, anchors[keep], rays[keep], sources=(k,)))
    return lines


def fit_line(points) -> tuple[float, float]:
    """Total-least-squares line; returns ``(theta, c)`` with normal ``(cos θ, sin θ)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise FeatureError("line fit needs at least two points")
    mean = pts.mean(axis=0)
    centered = pts - mean
    if not np.any(centered):
        raise FeatureError("line fit on coincident points")
    _, vecs = np.linalg.eigh(centered.T @ centered)
    n = vecs[:, 0]
    if n[1] < 0 or (n[1] == 0 and n[0] < 0):
        n = -n
    return float(np.arctan2(n[1], n[0])), float(n @ mean)


def line_residuals(points: np.ndarray, theta: float, offset: float) -> np.ndarray:
    return points @ np.array([np.cos(theta), np.sin(theta)]) - offset


def default_endpoint_tol(plane: QuadMesh) -> float:
    return ENDPOINT_TOL_FACTOR * float(np.median(plane.edge_lengths()))


def _orientation(direction: np.ndarray, axis_tol_deg: float) -> str | None:
    ang = np.degrees(np.arctan2(abs(direction[1]), abs(direction[0])))
    if ang <= axis_tol_deg:
        return "horizontal"
    if ang >= 90.0 - axis_tol_deg:
        return "vertical"
    return None


def _joined(a: FeatureLine, pa: np.ndarray, b: FeatureLine, pb: np.ndarray, flip_a: bool, flip_b: bool):
    ia = np.arange(len(a))[::-1] if flip_a else np.arange(len(a))
    ib = np.arange(len(b))[::-1] if flip_b else np.arange(len(b))
    anchors = Anchors.concat([a.anchors[ia], b.anchors[ib]])
    rays = ViewingRays.concat([a.rays[ia], b.rays[ib]])
    line = FeatureLine(a.cls, anchors, rays, sources=tuple(sorted(a.sources + b.sources)))
    return line, np.concatenate([pa[ia], pb[ib]])


def merge_feature_lines(lines: list[FeatureLine], plane: QuadMesh, endpoint_tol: float | None = None,
                        straightness_tol: float = STRAIGHTNESS_TOL, axis_tol_deg: float | None = AXIS_TOL_DEG,
                        ) -> list[FeatureLine]:
    """Greedy merging of same-class lines whose nearest endpoints are close and whose union stays straight.

    Lines are processed in a canonical order (class, then leftmost endpoint),
    so the result does not depend on the input order.  Non-boundary lines that
    end up neither near-horizontal nor near-vertical are removed when
    ``axis_tol_deg`` is set.
    """
    if endpoint_tol is None:
        endpoint_tol = default_endpoint_tol(plane)
    items = [(ln, ln.plane_points(plane)) for ln in lines if len(ln) >= 2]

    def key(item):
        ln, pts = item
        ends = pts[[0, -1]]
        lo = ends[np.lexsort((ends[:, 1], ends[:, 0]))[0]]
        return (CLASSES.index(ln.cls), float(lo[0]), float(lo[1]), len(pts), pts.tobytes())

    while True:
        items.sort(key=key)
        if len(items) < 2:
            break
        ends = np.array([[p[0], p[-1]] for _, p in items])  # (n, 2 ends, 2)
        cls = np.array([CLASSES.index(ln.cls) for ln, _ in items])
        # pairwise closest-endpoint distances, ends (start/end) x (start/end)
        d = np.linalg.norm(ends[:, None, :, None, :] - ends[None, :, None, :, :], axis=-1)
        dmin = d.reshape(len(items), len(items), 4).min(axis=-1)
        ok = (dmin <= endpoint_tol) & (cls[:, None] == cls[None, :])
        ii, jj = np.nonzero(np.triu(ok, k=1))
        merged = False
        for i, j in zip(ii, jj):
            (a, pa), (b, pb) = items[i], items[j]
            union = np.concatenate([pa, pb])
            if obb_of_points(union).straightness > straightness_tol:
                continue
            ea, eb = np.unravel_index(np.argmin(d[i, j]), (2, 2))
            # join so that the close endpoints meet: a ends at ea, b starts at eb
            new = _joined(a, pa, b, pb, flip_a=(ea == 0), flip_b=(eb == 1))
            items = [it for k, it in enumerate(items) if k not in (i, j)] + [new]
            merged = True
            break
        if not merged:
            break

    out = []
    for ln, pts in items:
        if len(np.unique(pts, axis=0)) < 2:
            continue
        theta, c = fit_line(pts)
        if ln.cls == "boundary":
            orient = "boundary"
        else:
            direction = np.array([-np.sin(theta), np.cos(theta)])
            orient = _orientation(direction, axis_tol_deg) if axis_tol_deg is not None else "any"
            if orient is None:
                continue
        out.append(replace(ln, theta=theta, offset=c, orientation=orient))
    return out


def fit_lines(lines: list[FeatureLine], plane: QuadMesh) -> list[FeatureLine]:
    return [replace(ln, theta=t, offset=c) for ln in lines for t, c in [fit_line(ln.plane_points(plane))]]


def project_feature_lines(pair: MeshPair, lines: list[FeatureLine], index: TriangleGrid | None = None):
    """Move planar feature points onto their fitted lines, keeping the shared anchors.

    Returns ``(lines, n_moved, n_kept)``; points whose projection leaves the
    planar mesh keep their previous anchor.
    """
    if not lines:
        return [], 0, 0
    plane = pair.plane
    if index is None:
        index = TriangleGrid(plane.triangle_coords())
    pts = [ln.plane_points(plane) for ln in lines]
    proj = []
    for ln, p in zip(lines, pts):
        n = ln.normal
        proj.append(p - np.outer(p @ n - ln.offset, n))
    anchors, found = locate_points(plane, np.concatenate(proj), index)
    out = []
    start = 0
    for ln in lines:
        sl = slice(start, start + len(ln))
        start += len(ln)
        new = ln.anchors.copy()
        f = found[sl]
        new.face[f] = anchors.face[sl][f]
        new.tri[f] = anchors.tri[sl][f]
        new.weights[f] = anchors.weights[sl][f]
        out.append(replace(ln, anchors=new))
    n_kept = int((~found).sum())
    if n_kept:
        log.info("feature projection: %d points left the planar mesh and kept their anchors", n_kept)
    return out, int(found.sum()), n_kept


# -- annotation file --------------------------------------------------------------

def read_segments(path) -> list[FeatureSegment]:
    """One segment per line: ``class u1 v1 u2 v2 ...``; ``#`` starts a comment."""
    segs = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                vals = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise FeatureError(f"{path}:{lineno}: non-numeric pixel coordinate") from None
            if len(vals) % 2 or len(vals) < 4:
                raise FeatureError(f"{path}:{lineno}: need an even number (>= 4) of coordinates")
            if not np.all(np.isfinite(vals)):
                raise FeatureError(f"{path}:{lineno}: NaN or Inf coordinate")
            try:
                segs.append(FeatureSegment(parts[0], vals.reshape(-1, 2)))
            except FeatureError as exc:
                raise FeatureError(f"{path}:{lineno}: {exc}") from None
    return segs


def write_segments(path, segments: list[FeatureSegment]) -> None:
    with open(path, "w") as fh:
        for s in segments:
            fh.write(s.cls + " " + " ".join(f"{v:.6f}" for v in s.pixels.ravel()) + "\n")

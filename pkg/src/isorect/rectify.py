"""Rectified output: region selection, inverse-mapped texture resampling and flat-layout error."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics
from .geometry import MeshError, MeshPair, TriangleGrid, barycentric_eval, locate_points, similarity_align

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 1000
DEFAULT_BACKGROUND = (255, 255, 255)
REGION_MODES = ("boundary", "aabb", "mesh")


class RectifyError(ValueError):
    pass


@dataclass
class PlaneLine:
    """A fitted line ``cos θ x + sin θ y = c`` in the plane and the points that support it."""

    cls: str
    theta: float
    offset: float
    points: np.ndarray


@dataclass(frozen=True)
class Region:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def plane_lines(lines, plane) -> list[PlaneLine]:
    """Convert pipeline feature lines (anchored on ``plane``) to :class:`PlaneLine`."""
    out = []
    for ln in lines:
        if isinstance(ln, PlaneLine):
            out.append(ln)
        else:
            out.append(PlaneLine(ln.cls, ln.theta, ln.offset, ln.plane_points(plane)))
    return out


def _intersect(l1: PlaneLine, l2: PlaneLine):
    a = np.array([[np.cos(l1.theta), np.sin(l1.theta)], [np.cos(l2.theta), np.sin(l2.theta)]])
    if abs(np.linalg.det(a)) < 1e-9:
        return None
    return np.linalg.solve(a, [l1.offset, l2.offset])


def _aabb(points) -> Region | None:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        return None
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.any(hi - lo <= 0):
        return None
    return Region(*lo, *hi)


def boundary_rectangle(lines: list[PlaneLine]) -> Region | None:
    """Bounding box of the corners where the outermost horizontal and vertical boundary lines meet."""
    bnd = [ln for ln in lines if ln.cls == "boundary" and len(ln.points)]
    # the normal of a horizontal line points along y
    horiz = [ln for ln in bnd if abs(np.sin(ln.theta)) >= abs(np.cos(ln.theta))]
    vert = [ln for ln in bnd if abs(np.sin(ln.theta)) < abs(np.cos(ln.theta))]
    if len(horiz) < 2 or len(vert) < 2:
        return None
    horiz.sort(key=lambda ln: float(ln.points[:, 1].mean()))
    vert.sort(key=lambda ln: float(ln.points[:, 0].mean()))
    corners = []
    for h in (horiz[0], horiz[-1]):
        for v in (vert[0], vert[-1]):
            p = _intersect(h, v)
            if p is None:
                return None
            corners.append(p)
    return _aabb(corners)


def output_region(lines, plane, mode: str = "boundary") -> Region:
    """Plane rectangle to render.

    ``boundary`` uses the fitted boundary lines when four sides are present,
    falling back to the box of all feature-line points and then to the box of
    the planar mesh; ``aabb`` starts at the second option, ``mesh`` at the last.
    """
    if mode not in REGION_MODES:
        raise RectifyError(f"unknown region mode {mode!r}")
    pl = plane_lines(lines, plane) if lines else []
    if mode == "boundary":
        reg = boundary_rectangle(pl)
        if reg is not None:
            return reg
        log.warning("boundary lines do not bound a region; using the feature-line box")
    if mode in ("boundary", "aabb") and pl:
        reg = _aabb(np.concatenate([ln.points for ln in pl]))
        if reg is not None:
            return reg
        log.warning("feature lines span no area; using the mesh box")
    reg = _aabb(plane.vertices)
    if reg is None:
        raise RectifyError("planar mesh has no extent")
    return reg


def output_shape(region: Region, resolution: int = DEFAULT_RESOLUTION) -> tuple[int, int]:
    """``(height, width)`` in pixels with the long side equal to ``resolution``."""
    if resolution < 1:
        raise RectifyError("resolution must be positive")
    if region.width >= region.height:
        return max(1, int(round(resolution * region.height / region.width))), resolution
    return resolution, max(1, int(round(resolution * region.width / region.height)))


def bilinear_sample(image: np.ndarray, uv: np.ndarray, background) -> np.ndarray:
    """Sample ``image[v, u]`` at real pixel coordinates; outside the image gives ``background``."""
    h, w = image.shape[:2]
    img = image.reshape(h, w, -1).astype(float)
    bg = np.broadcast_to(np.asarray(background, dtype=float), (img.shape[2],))
    u, v = uv[:, 0], uv[:, 1]
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    out = np.tile(bg, (len(uv), 1))
    if not inside.any():
        return out
    ui, vi = u[inside], v[inside]
    u0 = np.minimum(np.floor(ui).astype(np.int64), w - 2) if w > 1 else np.zeros(len(ui), dtype=np.int64)
    v0 = np.minimum(np.floor(vi).astype(np.int64), h - 2) if h > 1 else np.zeros(len(vi), dtype=np.int64)
    fu = (ui - u0)[:, None]
    fv = (vi - v0)[:, None]
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    out[inside] = ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u1]
                   + (1 - fu) * fv * img[v1, u0] + fu * fv * img[v1, u1])
    return out


def plane_to_reference_pixels(pair: MeshPair, cam: CameraIntrinsics, pts: np.ndarray,
                              index: TriangleGrid | None = None) -> np.ndarray:
    """Reference-image pixel for each plane point (NaN outside the mesh or behind the camera)."""
    anchors, found = locate_points(pair.plane, pts, index)
    xyz = barycentric_eval(pair.space, anchors)
    out = np.full((len(pts), 2), np.nan)
    ok = found & (xyz[:, 2] > 0)
    out[ok, 0] = cam.fu * xyz[ok, 0] / xyz[ok, 2] + cam.cu
    out[ok, 1] = cam.fv * xyz[ok, 1] / xyz[ok, 2] + cam.cv
    return out


def render(pair: MeshPair, cam: CameraIntrinsics, image: np.ndarray, region: Region,
           resolution: int = DEFAULT_RESOLUTION, background=DEFAULT_BACKGROUND, chunk: int = 262_144) -> np.ndarray:
    """Resample the reference image onto a regular grid over ``region`` of the planar mesh."""
    if image is None:
        raise RectifyError("reference image missing")
    image = np.asarray(image)
    if region.width <= 0 or region.height <= 0:
        raise RectifyError("empty output region")
    h, w = output_shape(region, resolution)
    channels = 1 if image.ndim == 2 else image.shape[2]
    bg = np.broadcast_to(np.asarray(background, dtype=float).ravel()[:channels]
                         if np.size(background) >= channels else np.asarray(background, dtype=float), (channels,))
    sx, sy = region.width / w, region.height / h
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pts = np.column_stack([region.x0 + (cols.ravel() + 0.5) * sx, region.y0 + (rows.ravel() + 0.5) * sy])
    index = TriangleGrid(pair.plane.triangle_coords())
    out = np.empty((len(pts), channels))
    for s in range(0, len(pts), chunk):
        uv = plane_to_reference_pixels(pair, cam, pts[s:s + chunk], index)
        out[s:s + chunk] = bilinear_sample(image, uv, bg)
    res = np.clip(np.round(out), 0, 255).astype(np.uint8).reshape(h, w, channels)
    return res[:, :, 0] if image.ndim == 2 else res


def displacement_error(recovered, truth, diagonal: float | None = None, mask=None) -> float:
    """Mean vertex distance after the best similarity alignment, relative to the document diagonal.

    ``diagonal`` defaults to the bounding-box diagonal of ``truth``; ``mask``
    selects the vertices that take part.
    """
    rec = np.asarray(getattr(recovered, "vertices", recovered), dtype=float).reshape(-1, 2)
    tru = np.asarray(getattr(truth, "vertices", truth), dtype=float).reshape(-1, 2)
    if rec.shape != tru.shape:
        raise MeshError(f"vertex count mismatch: {rec.shape} vs {tru.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        rec, tru = rec[mask], tru[mask]
    if len(rec) < 2:
        raise MeshError("need at least two vertices to compare")
    if diagonal is None:
        diagonal = float(np.linalg.norm(tru.max(axis=0) - tru.min(axis=0)))
    if diagonal <= 0:
        raise MeshError("ground truth has zero extent")
    s, r, t = similarity_align(rec, tru)
    aligned = s * rec @ r.T + t
    return float(np.linalg.norm(aligned - tru, axis=1).mean() / diagonal)


# -- image files ---------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise RectifyError(f"unsupported image format {path.suffix!r} (PNG or PPM)")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise RectifyError(f"cannot read image {path}: {exc}") from None


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise RectifyError(f"unsupported image format {path.suffix!r} (PNG or PPM)")
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format=fmt)

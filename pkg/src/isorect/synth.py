"""Ground-truth scenes: a flat sheet folded isometrically in front of a pinhole camera.

The sheet lives in plane coordinates ``x in [0, W]`` (page right) and
``y in [0, H]`` (page down).  Creases are straight lines in the plane; the part
of the sheet beyond a crease (seen from the sheet centre) is rotated about it.
Creases must not cross inside the sheet, so every point is moved by a nested
chain of rotations and the map is exactly piecewise rigid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, MeshRayCaster, ViewingRays, project, viewing_rays, write_intrinsics
from .features import FeatureSegment, write_segments
from .geometry import MeshPair, QuadMesh, barycentric_eval, grid_mesh
from .pointcloud import PointCloud, save_cloud

log = logging.getLogger(__name__)


class SceneError(ValueError):
    pass


@dataclass
class Crease:
    """Fold line through plane points ``a`` and ``b``; ``angle`` in degrees (positive folds towards the camera)."""

    a: tuple
    b: tuple
    angle: float


@dataclass
class SynthScene:
    width: float = 1.0
    height: float = 1.414
    creases: list = field(default_factory=list)
    curl: tuple | None = None  # (x0, radius, sign): cylinder bend of the part x > x0
    rotation: tuple = (0.0, 0.0, 0.0)  # degrees about x, y, z (applied in that order)
    distance: float = 1.7
    camera: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(1.0, 1100.0, 1100.0, 400.0, 600.0))
    image_size: tuple = (800, 1200)  # (width, height) in pixels
    texture: str = "ruled"
    lines_h: int = 12
    lines_v: int = 3
    margin: float = 0.08
    n_points: int = 5000
    sigma: float = 0.002  # Gaussian noise, fraction of the clean cloud diagonal
    outliers: int = 0
    segment_length: float = 0.0  # > 0 cuts texture lines into pieces of this plane length
    segment_gap: float = 0.0
    pixel_noise: float = 0.0
    boundary: bool = True
    seed: int = 0

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))


# -- folding ---------------------------------------------------------------------

def _clip_line_to_rect(a, b, w, h):
    """Segment of the infinite line through a, b inside [0,w]x[0,h] (Liang-Barsky), or None."""
    a = np.asarray(a, float)
    d = np.asarray(b, float) - a
    t0, t1 = -np.inf, np.inf
    for k, hi in ((0, w), (1, h)):
        if abs(d[k]) < 1e-15:
            if a[k] < 0 or a[k] > hi:
                return None
            continue
        ta, tb = (0 - a[k]) / d[k], (hi - a[k]) / d[k]
        t0 = max(t0, min(ta, tb))
        t1 = min(t1, max(ta, tb))
    if t0 >= t1:
        return None
    return a + t0 * d, a + t1 * d


def _rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    k = axis / np.linalg.norm(axis)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def _euler(rx, ry, rz) -> np.ndarray:
    rx, ry, rz = np.radians([rx, ry, rz])
    return (_rodrigues(np.array([0, 0, 1.0]), rz) @ _rodrigues(np.array([0, 1.0, 0]), ry)
            @ _rodrigues(np.array([1.0, 0, 0]), rx))


class FoldMap:
    """Piecewise-rigid embedding of the sheet; ``embed`` maps plane -> camera frame."""

    def __init__(self, scene: SynthScene):
        self.scene = scene
        w, h = scene.width, scene.height
        self.center = np.array([w / 2, h / 2])
        segs = []
        for c in scene.creases:
            seg = _clip_line_to_rect(c.a, c.b, w, h)
            if seg is None:
                raise SceneError(f"crease {c} does not cross the sheet")
            if abs(c.angle) >= 180:
                raise SceneError("fold angles must lie in (-180, 180) degrees")
            segs.append(seg)
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                if _segments_cross(*segs[i], *segs[j]):
                    raise SceneError(f"creases {i} and {j} intersect inside the sheet (self-intersecting fold)")
        self.segs = segs
        # normal pointing away from the sheet centre: the moving side
        self.normals = []
        self.offsets = []
        for (p, q) in segs:
            d = q - p
            n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
            side = n @ (self.center - p)
            if abs(side) < 1e-12:
                # crease through the centre: the +x (then +y) side moves
                if n[0] < 0 or (n[0] == 0 and n[1] < 0):
                    n = -n
            elif side > 0:
                n = -n
            self.normals.append(n)
            self.offsets.append(float(n @ p))
        # depth = number of creases whose moving side contains this crease
        depth = []
        for i, (p, q) in enumerate(segs):
            mid = 0.5 * (p + q)
            depth.append(sum(1 for j in range(len(segs)) if j != i and self.normals[j] @ mid > self.offsets[j]))
        self.order = np.argsort(depth, kind="stable")
        self.rot = [_rodrigues(np.array([*(q - p), 0.0]), np.radians(c.angle) * -1.0)
                    for (p, q), c in zip(segs, scene.creases)]
        self.base = [np.array([*p, 0.0]) for p, _ in segs]
        self.pose = _euler(*scene.rotation)
        # make the rotation sense independent of the crease point order
        for k, ((p, q), n) in enumerate(zip(segs, self.normals)):
            d = q - p
            if d[0] * n[1] - d[1] * n[0] < 0:
                self.rot[k] = self.rot[k].T

    def region_masks(self, pts: np.ndarray) -> np.ndarray:
        """``(n, n_creases)`` booleans: which creases separate each point from the centre."""
        if not self.segs:
            return np.zeros((len(pts), 0), dtype=bool)
        n = np.array(self.normals)
        return pts @ n.T > np.array(self.offsets)

    def _fold_frame(self, pts: np.ndarray, masks: np.ndarray) -> np.ndarray:
        p3 = np.column_stack([pts, np.zeros(len(pts))])
        # apply the deepest crease first
        for k in self.order[::-1]:
            m = masks[:, k]
            if m.any():
                p3[m] = (p3[m] - self.base[k]) @ self.rot[k].T + self.base[k]
        return p3

    def _curl(self, p3: np.ndarray) -> np.ndarray:
        if self.scene.curl is None:
            return p3
        x0, r, sign = self.scene.curl
        out = p3.copy()
        m = p3[:, 0] > x0
        s = p3[m, 0] - x0
        out[m, 0] = x0 + r * np.sin(s / r)
        out[m, 2] = p3[m, 2] - sign * r * (1 - np.cos(s / r))
        return out

    def _to_camera(self, p3: np.ndarray) -> np.ndarray:
        c = np.array([self.center[0], self.center[1], 0.0])
        return (p3 - c) @ self.pose.T + np.array([0.0, 0.0, self.scene.distance])

    def embed(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        return self._to_camera(self._curl(self._fold_frame(pts, self.region_masks(pts))))

    def region_transforms(self):
        """Distinct rigid maps ``(mask, R, t)`` with camera point = R @ (x, y, 0) + t (fold scenes only)."""
        if self.scene.curl is not None:
            raise SceneError("curled scenes are not piecewise rigid")
        out = []
        n = len(self.segs)
        for code in range(2 ** n):
            mask = np.array([(code >> k) & 1 for k in range(n)], dtype=bool)
            basis = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
            img = self._to_camera(self._fold_frame(basis, np.repeat(mask[None], 3, axis=0)))
            r = np.column_stack([img[1] - img[0], img[2] - img[0], np.cross(img[1] - img[0], img[2] - img[0])])
            out.append((mask, r, img[0]))
        return out

    def cast(self, rays: ViewingRays):
        """Plane coordinates where camera rays first hit the sheet; NaN for misses."""
        d = rays.direction
        best_t = np.full(len(d), np.inf)
        best_xy = np.full((len(d), 2), np.nan)
        if self.scene.curl is not None:
            return self._cast_mesh(rays)
        for mask, r, t0 in self.region_transforms():
            nrm = r[:, 2]
            denom = d @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (t0 @ nrm) / denom
            hitp = d * t[:, None]
            xy = np.linalg.lstsq(r[:, :2], (hitp - t0).T, rcond=None)[0].T
            inside = ((xy[:, 0] >= -1e-12) & (xy[:, 0] <= self.scene.width + 1e-12)
                      & (xy[:, 1] >= -1e-12) & (xy[:, 1] <= self.scene.height + 1e-12))
            if self.segs:
                inside &= np.all(self.region_masks(np.nan_to_num(xy)) == mask, axis=1)
            ok = inside & np.isfinite(t) & (t > 0) & (t < best_t)
            best_t[ok] = t[ok]
            best_xy[ok] = xy[ok]
        return best_xy

    def _cast_mesh(self, rays: ViewingRays, res=(400, 566)):
        plane = grid_mesh(res, spacing=(self.scene.width / (res[0] - 1), self.scene.height / (res[1] - 1)))
        space = QuadMesh(res, self.embed(plane.vertices))
        anchors, _, hit = MeshRayCaster(space).cast(rays)
        xy = barycentric_eval(plane, anchors)
        xy[~hit] = np.nan
        return xy


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def fold_sheet(scene: SynthScene) -> FoldMap:
    return FoldMap(scene)


# -- ground-truth meshes and texture --------------------------------------------------

def ground_truth_pair(scene: SynthScene, dims: tuple[int, int]) -> MeshPair:
    """Regular plane grid over the sheet and its exact embedding."""
    fm = FoldMap(scene)
    plane = grid_mesh(dims, spacing=(scene.width / (dims[0] - 1), scene.height / (dims[1] - 1)))
    return MeshPair(QuadMesh(dims, fm.embed(plane.vertices)), plane)


def texture_lines(scene: SynthScene):
    """Straight texture lines in the plane as ``(start, end)`` pairs."""
    w, h, m = scene.width, scene.height, scene.margin
    lines = []
    if scene.texture in ("ruled", "grid"):
        for y in np.linspace(m, h - m, scene.lines_h) if scene.lines_h else []:
            lines.append((np.array([m, y]), np.array([w - m, y])))
        if scene.lines_v:
            for x in np.linspace(m, w - m, scene.lines_v):
                lines.append((np.array([x, m]), np.array([x, h - m])))
    return lines


def boundary_lines(scene: SynthScene):
    w, h = scene.width, scene.height
    c = [np.array(p, float) for p in ((0, 0), (w, 0), (w, h), (0, h))]
    return [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]


def texture_value(scene: SynthScene, xy: np.ndarray) -> np.ndarray:
    """Grey level in [0, 1] of the page texture at plane points (NaN rows -> NaN)."""
    x, y = xy[:, 0], xy[:, 1]
    val = np.ones(len(xy))
    if scene.texture == "checker":
        cell = scene.width / 8
        k = (np.floor(x / cell) + np.floor(y / cell)) % 2
        val = np.where(k == 0, 0.15, 0.95)
    else:
        half = 0.004 * scene.width
        for a, b in texture_lines(scene):
            d = b - a
            t = np.clip(((xy - a) @ d) / (d @ d), 0, 1)
            dist = np.linalg.norm(xy - (a + t[:, None] * d), axis=1)
            val = np.minimum(val, np.clip(dist / half - 0.5, 0, 1) * 0.85 + 0.15)
    val[np.isnan(x)] = np.nan
    return val


# -- sampling ------------------------------------------------------------------

@dataclass
class SceneSample:
    cloud: PointCloud
    labels: np.ndarray  # 1 inlier, 0 outlier
    segments: list
    segment_line_ids: list
    image: np.ndarray
    camera: CameraIntrinsics


def _sample_plane_points(scene: SynthScene, n: int, rng) -> np.ndarray:
    """Texture-weighted samples: SfM-style density is higher near ink."""
    out = []
    need = n
    while need > 0:
        cand = rng.uniform([0, 0], [scene.width, scene.height], size=(max(2 * need, 64), 2))
        ink = 1.0 - texture_value(scene, cand)
        accept = rng.uniform(size=len(cand)) < 0.35 + 0.65 * ink / 0.85
        cand = cand[accept][:need]
        out.append(cand)
        need -= len(cand)
    return np.concatenate(out)


def _plane_line_segments(scene: SynthScene, fm: FoldMap, a, b, step: float):
    """Split the plane segment a-b at creases (and into detector-sized pieces)."""
    length = float(np.linalg.norm(b - a))
    n = max(int(np.ceil(length / step)), 1) + 1
    t = np.linspace(0, 1, n)
    pts = a + t[:, None] * (b - a)
    masks = fm.region_masks(pts)
    cut = np.zeros(n - 1, dtype=bool)
    if masks.shape[1]:
        cut = np.any(masks[1:] != masks[:-1], axis=1)
    pieces = []
    cur = [0]
    for k in range(1, n):
        if cut[k - 1]:
            pieces.append(cur)
            cur = [k]
        else:
            cur.append(k)
    pieces.append(cur)
    out = []
    for idx in pieces:
        p = pts[idx]
        if scene.segment_length > 0:
            s = np.linalg.norm(p - p[0], axis=1)
            period = scene.segment_length + scene.segment_gap
            phase = s % period
            keep = phase <= scene.segment_length
            chunk_id = np.floor(s / period).astype(int)
            for c in np.unique(chunk_id[keep]):
                q = p[keep & (chunk_id == c)]
                if len(q) >= 2:
                    out.append(q)
        elif len(p) >= 2:
            out.append(p)
    return out


def sample_scene(scene: SynthScene, render_image: bool = True) -> SceneSample:
    rng = np.random.default_rng(scene.seed)
    fm = FoldMap(scene)
    cam = scene.camera

    xy = _sample_plane_points(scene, scene.n_points, rng)
    clean = fm.embed(xy)
    if np.any(clean[:, 2] <= 0):
        raise SceneError("sheet is not entirely in front of the camera")
    diag = float(np.linalg.norm(clean.max(axis=0) - clean.min(axis=0)))
    pts = clean + rng.normal(scale=scene.sigma * diag, size=clean.shape)
    labels = np.ones(len(pts), dtype=np.int64)
    if scene.outliers:
        lo, hi = clean.min(axis=0), clean.max(axis=0)
        out = rng.uniform(lo, hi, size=(scene.outliers, 3))
        pts = np.concatenate([pts, out])
        labels = np.concatenate([labels, np.zeros(scene.outliers, dtype=np.int64)])

    segments, ids = [], []
    step = scene.diagonal / 400
    sources = []
    if scene.boundary:
        sources += [("boundary", a, b) for a, b in boundary_lines(scene)]
    sources += [("text" if abs(b[1] - a[1]) < 1e-12 else "edge", a, b) for a, b in texture_lines(scene)]
    w_img, h_img = scene.image_size
    for line_id, (cls, a, b) in enumerate(sources):
        parts = _plane_line_segments(replace(scene, segment_length=0.0) if cls == "boundary" else scene, fm, a, b, step)
        for part in parts:
            px = project(cam, fm.embed(part))
            if scene.pixel_noise > 0:
                px = px + rng.normal(scale=scene.pixel_noise, size=px.shape)
            inside = (px[:, 0] >= 0) & (px[:, 0] <= w_img - 1) & (px[:, 1] >= 0) & (px[:, 1] <= h_img - 1)
            px = px[inside]
            if len(px) >= 2:
                segments.append(FeatureSegment(cls, px))
                ids.append(line_id)

    image = render_reference(scene, fm) if render_image else None
    return SceneSample(PointCloud(pts), labels, segments, ids, image, cam)


def render_reference(scene: SynthScene, fm: FoldMap | None = None) -> np.ndarray:
    """Ray-cast the textured sheet into an ``(H, W, 3)`` uint8 image (background mid-grey)."""
    fm = fm or FoldMap(scene)
    w, h = scene.image_size
    u, v = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.column_stack([u.ravel(), v.ravel()])
    img = np.empty(len(pix))
    chunk = 200_000
    for s in range(0, len(pix), chunk):
        rays = viewing_rays(scene.camera, pix[s:s + chunk])
        xy = fm.cast(rays)
        val = texture_value(scene, xy)
        img[s:s + chunk] = np.where(np.isnan(val), 0.45, val)
    g = np.round(img.reshape(h, w) * 255).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


# -- scene spec files and bundles ---------------------------------------------------

_SCALAR_KEYS = {
    "width": float, "height": float, "distance": float, "texture": str, "lines_h": int, "lines_v": int,
    "margin": float, "n_points": int, "sigma": float, "outliers": int, "segment_length": float,
    "segment_gap": float, "pixel_noise": float, "seed": int,
}


def parse_scene(text: str) -> SynthScene:
    """Key-value scene description.

    Scalars: ``width height distance texture lines_h lines_v margin n_points sigma
    outliers segment_length segment_gap pixel_noise seed boundary``.
    Repeated ``crease x0 y0 x1 y1 angle`` lines; ``rotation rx ry rz``;
    ``camera f ku kv cu cv``; ``image W H``; ``curl x0 radius sign``.
    """
    kw: dict = {}
    creases = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            if key in _SCALAR_KEYS:
                if len(vals) != 1:
                    raise SceneError(f"line {lineno}: {key} takes one value")
                kw[key] = _SCALAR_KEYS[key](vals[0])
            elif key == "boundary":
                kw["boundary"] = vals[0].lower() in ("1", "true", "yes", "on")
            elif key == "crease":
                x0, y0, x1, y1, ang = (float(v) for v in vals)
                creases.append(Crease((x0, y0), (x1, y1), ang))
            elif key == "rotation":
                kw["rotation"] = tuple(float(v) for v in vals[:3])
            elif key == "camera":
                kw["camera"] = CameraIntrinsics(*(float(v) for v in vals))
            elif key == "image":
                kw["image_size"] = (int(vals[0]), int(vals[1]))
            elif key == "curl":
                kw["curl"] = (float(vals[0]), float(vals[1]), float(vals[2]))
            else:
                raise SceneError(f"line {lineno}: unknown key {key!r}")
        except (TypeError, ValueError, IndexError) as exc:
            if isinstance(exc, SceneError):
                raise
            raise SceneError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    kw["creases"] = creases
    scene = SynthScene(**kw)
    if scene.texture not in ("ruled", "grid", "checker", "plain"):
        raise SceneError(f"unknown texture {scene.texture!r}")
    FoldMap(scene)
    return scene


def read_scene(path) -> SynthScene:
    return parse_scene(Path(path).read_text())


def format_scene(scene: SynthScene) -> str:
    lines = [f"{k} {getattr(scene, k)}" for k in _SCALAR_KEYS]
    lines.append(f"boundary {int(scene.boundary)}")
    lines += [f"crease {c.a[0]} {c.a[1]} {c.b[0]} {c.b[1]} {c.angle}" for c in scene.creases]
    lines.append("rotation " + " ".join(str(v) for v in scene.rotation))
    cam = scene.camera
    lines.append(f"camera {cam.f} {cam.ku} {cam.kv} {cam.cu} {cam.cv}")
    lines.append(f"image {scene.image_size[0]} {scene.image_size[1]}")
    if scene.curl is not None:
        lines.append("curl " + " ".join(str(v) for v in scene.curl))
    return "\n".join(lines) + "\n"


def write_bundle(scene: SynthScene, out_dir, sample: SceneSample | None = None) -> Path:
    """Write cloud.xyz, labels.txt, cam.txt, segments.txt, segment_ids.txt, ref.png and scene.txt."""
    from .rectify import write_image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample = sample or sample_scene(scene)
    save_cloud(out / "cloud.xyz", sample.cloud)
    np.savetxt(out / "labels.txt", sample.labels, fmt="%d")
    write_intrinsics(out / "cam.txt", sample.camera)
    write_segments(out / "segments.txt", sample.segments)
    np.savetxt(out / "segment_ids.txt", np.asarray(sample.segment_line_ids, dtype=np.int64), fmt="%d")
    write_image(out / "ref.png", sample.image)
    (out / "scene.txt").write_text(format_scene(scene))
    return out


# -- named scenes --------------------------------------------------------------------

def _single_fold() -> SynthScene:
    return SynthScene(creases=[Crease((0.5, 0.0), (0.5, 1.414), 90.0)], rotation=(0.0, -45.0, 0.0), distance=1.7)


def _two_fold() -> SynthScene:
    return SynthScene(creases=[Crease((0.3, 0.0), (0.38, 1.414), 50.0), Crease((0.72, 0.0), (0.65, 1.414), -45.0)],
                      distance=2.0, n_points=1500, sigma=0.005, lines_v=0, seed=1)


PRESETS = {
    "flat": lambda: SynthScene(rotation=(10.0, -15.0, 0.0)),
    "single-fold": _single_fold,
    "single-fold-outliers": lambda: replace(_single_fold(), outliers=1000),
    "two-fold-ruled": _two_fold,
}

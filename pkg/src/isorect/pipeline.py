"""Initialisation and the nested optimisation loop that couples the 3D mesh and its flattening."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .camera import CameraIntrinsics, MeshRayCaster, ViewingRays, back_project
from .energies import (TERMS, Correspondences, EnergyError, Objective, SolverState, WeightSchedule,
                       total_objective)
from .features import (STRAIGHTNESS_TOL, FeatureLine, FeatureSegment, lift_segments, merge_feature_lines,
                       project_feature_lines)
from .geometry import (Anchors, MeshError, MeshPair, QuadMesh, TriangleGrid, face_vertex_indices, grid_mesh,
                       min_area_box, rotation_2d)
from .optim import LbfgsResult, lbfgs
from .pointcloud import DEFAULT_PHI, CloudError, MeshProximity, PixelKnn, PointCloud, normalize_cloud
from .subdivision import subdivide_pair

log = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 5
SOLVER_STEPS = 50
DIAG_COLUMNS = ("round", "iter", "F_start", "F", *TERMS, "lambda_line", "lambda_ray", "n_valid",
                "n_lines", "solver_steps", "solver_status", "wall_time")
TRACE_COLUMNS = ("round", "iter", "step", "F")


class PipelineError(RuntimeError):
    pass


class PipelineDiverged(PipelineError):
    """Raised when F keeps rising between inner iterations; ``result`` holds the partial run."""

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass
class PipelineConfig:
    schedule: WeightSchedule = field(default_factory=WeightSchedule)
    dims: tuple = (20, 30)
    k: int = 3
    phi: float = DEFAULT_PHI
    straightness_tol: float = STRAIGHTNESS_TOL
    solver_steps: int = SOLVER_STEPS
    solver_rel_tol: float | None = 1e-6  # None: use the schedule's eps
    feature_projection: bool = True
    refine: bool = True
    unfold_iterations: int = 20
    bounds_margin: float = 0.02  # grid overhang beyond the boundary box, fraction of its size

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 2 or min(self.dims) < 2:
            raise PipelineError(f"dims must be at least 2x2, got {self.dims}")
        if self.k < 1:
            raise PipelineError("k must be >= 1")
        if not self.phi > 0:
            raise PipelineError("phi must be positive")
        if self.solver_steps < 1:
            raise PipelineError("solver_steps must be >= 1")

    @property
    def rounds(self) -> int:
        return self.schedule.rounds

    @property
    def subdivisions(self) -> int:
        return self.schedule.rounds - 1

    @property
    def rel_tol(self) -> float:
        return self.schedule.eps if self.solver_rel_tol is None else self.solver_rel_tol


@dataclass
class PipelineInputs:
    cloud: PointCloud
    camera: CameraIntrinsics
    segments: list = field(default_factory=list)
    image_size: tuple | None = None  # (width, height) of the reference image


@dataclass
class RunResult:
    pair: MeshPair  # normalised units
    scale: float  # normalised = original * scale
    lines: list
    valid: np.ndarray
    schedule: WeightSchedule
    diagnostics: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    status: str = "ok"

    def pair_original_units(self) -> MeshPair:
        return MeshPair(self.pair.space.with_vertices(self.pair.space.vertices / self.scale),
                        self.pair.plane.with_vertices(self.pair.plane.vertices / self.scale))


# -- initialisation ------------------------------------------------------------------

def init_image_mesh(bounds, dims) -> QuadMesh:
    """Uniform pixel grid over ``bounds``.

    ``bounds`` is either ``(u_min, v_min, u_max, v_max)`` or a list of boundary
    polylines (pixel arrays), in which case their bounding box is used.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 2 or min(dims) < 2:
        raise MeshError(f"dims must be at least 2x2, got {dims}")
    if isinstance(bounds, (list, tuple)) and bounds and not np.isscalar(bounds[0]):
        pts = np.concatenate([np.asarray(getattr(b, "pixels", b), float).reshape(-1, 2) for b in bounds])
        bounds = (*pts.min(axis=0), *pts.max(axis=0))
    u0, v0, u1, v1 = (float(b) for b in bounds)
    if not (np.isfinite([u0, v0, u1, v1]).all() and u1 > u0 and v1 > v0):
        raise MeshError(f"degenerate image bounds {bounds}")
    return grid_mesh(dims, origin=(u0, v0), spacing=((u1 - u0) / (dims[0] - 1), (v1 - v0) / (dims[1] - 1)))


def rbf_depths(pixel_sites: np.ndarray, depths: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Depth at ``queries`` from the ``k`` nearest sites weighted by ``1 / (1 + r^2)``, r in pixels."""
    knn = PixelKnn(pixel_sites)
    k = min(k, len(pixel_sites))
    idx = knn.query(queries, k)
    r2 = ((pixel_sites[idx] - queries[:, None, :]) ** 2).sum(axis=-1)
    w = 1.0 / (1.0 + r2)
    return (w * depths[idx]).sum(axis=1) / w.sum(axis=1)


def init_space_mesh(image_mesh: QuadMesh, cloud: PointCloud, cam: CameraIntrinsics, k: int = 3) -> QuadMesh:
    """Lift the pixel grid to 3D with RBF-interpolated depths of the projected cloud."""
    pts = cloud.points[cloud.valid]
    pts = pts[pts[:, 2] > 0]
    if len(pts) == 0:
        raise CloudError("no cloud points in front of the camera")
    pix = np.column_stack([cam.fu * pts[:, 0] / pts[:, 2] + cam.cu, cam.fv * pts[:, 1] / pts[:, 2] + cam.cv])
    z = rbf_depths(pix, pts[:, 2], image_mesh.vertices, k)
    return QuadMesh(image_mesh.dims, back_project(cam, image_mesh.vertices, z))


def _local_quad_frames(space: QuadMesh) -> np.ndarray:
    """Per-face 2D coordinates ``(n_faces, 4, 2)`` of the quad corners in a camera-consistent frame."""
    q = space.vertices[face_vertex_indices(space.dims)]  # (nf, 4, 3)
    c = q.mean(axis=1)
    n = np.cross(q[:, 2] - q[:, 0], q[:, 3] - q[:, 1])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", n, c) < 0
    n[flip] *= -1  # point away from the camera
    e1 = (q[:, 1] - q[:, 0]) + (q[:, 2] - q[:, 3])
    e1 -= np.einsum("ij,ij->i", e1, n)[:, None] * n
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    rel = q - c[:, None, :]
    return np.stack([np.einsum("fkj,fj->fk", rel, e1), np.einsum("fkj,fj->fk", rel, e2)], axis=-1)


_PAIRS = np.array([(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (1, 3)])


def unfold_quads(space: QuadMesh, seed: np.ndarray, iterations: int = 20) -> np.ndarray:
    """Stitch independently unfolded quads into one planar grid by local/global least squares.

    The local step picks the best rotation of each quad onto the current layout;
    the global step solves the sparse normal equations with vertex 0 held at
    its seed position.
    """
    fv = face_vertex_indices(space.dims)
    local = _local_quad_frames(space)
    nf, nv = len(fv), space.n_vertices
    a_idx, b_idx = fv[:, _PAIRS[:, 0]].ravel(), fv[:, _PAIRS[:, 1]].ravel()
    p_edges = (local[:, _PAIRS[:, 0]] - local[:, _PAIRS[:, 1]])  # (nf, 6, 2)
    rows = np.repeat(np.arange(nf * 6), 2)
    cols = np.column_stack([a_idx, b_idx]).ravel()
    vals = np.tile([1.0, -1.0], nf * 6)
    a = coo_matrix((vals, (rows, cols)), shape=(nf * 6, nv)).tocsc()
    a_free = a[:, 1:]
    lu = splu((a_free.T @ a_free).tocsc())
    at_free = a_free.T.tocsr()
    a0 = a[:, 0].toarray().ravel()
    v = np.asarray(seed, dtype=float).copy()
    for _ in range(iterations):
        q_edges = (v[fv[:, _PAIRS[:, 0]]] - v[fv[:, _PAIRS[:, 1]]])
        m = np.einsum("fei,fej->fij", q_edges, p_edges)  # sum q p^T
        ang = np.arctan2(m[:, 1, 0] - m[:, 0, 1], m[:, 0, 0] + m[:, 1, 1])
        cs, sn = np.cos(ang), np.sin(ang)
        rot = np.stack([np.stack([cs, -sn], -1), np.stack([sn, cs], -1)], -2)
        rhs = np.einsum("fij,fej->fei", rot, p_edges).reshape(-1, 2)
        rhs = rhs - np.outer(a0, v[0])
        v[1:] = lu.solve(at_free @ rhs)
    return v


def signed_triangle_areas(plane: QuadMesh) -> np.ndarray:
    t = plane.triangle_coords()
    e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def upright(plane: QuadMesh, reference_points: np.ndarray | None = None):
    """Rotate and translate so the minimum-area box of ``reference_points`` (default: mesh boundary) is axis-aligned.

    Of the four axis-aligned rotations the one keeping the grid's first
    direction closest to +x is chosen.  Returns ``(plane, R, t)`` with
    ``new = old @ R.T + t``.
    """
    pts = plane.vertices[plane.boundary_indices()] if reference_points is None else reference_points
    box = min_area_box(pts)
    r = box.axes.copy()  # rows are the box axes
    if np.linalg.det(r) < 0:
        r[1] *= -1
    g = plane.grid()
    di = (g[-1] - g[0]).mean(axis=0) @ r.T
    best = max(range(4), key=lambda k: (rotation_2d(k * np.pi / 2) @ di)[0])
    r = rotation_2d(best * np.pi / 2) @ r
    rotated = plane.vertices @ r.T
    corners = box.corners() @ r.T
    t = -corners.min(axis=0)
    return plane.with_vertices(rotated + t), r, t


def init_plane_mesh(space: QuadMesh, seed: QuadMesh | None = None, iterations: int = 20) -> QuadMesh:
    """Initial flattening of ``space`` (before refinement), upright and fold-free."""
    if seed is None:
        seed = grid_mesh(space.dims)
    seed_v = np.asarray(seed.vertices, dtype=float)
    s3 = space.edge_lengths().sum()
    s2 = seed.edge_lengths().sum()
    if s2 <= 0 or s3 <= 0:
        raise MeshError("degenerate mesh: zero total edge length")
    seed_v = seed_v * (s3 / s2)
    v = unfold_quads(space, seed_v, iterations)
    min_area = 1e-12 * (s3 / max(len(space.edge_lengths()), 1)) ** 2

    def folded(t):
        return np.any(signed_triangle_areas(QuadMesh(space.dims, seed_v + t * (v - seed_v))) <= min_area)

    if folded(0.0):
        raise MeshError("initial flattening collapsed: the seed grid has zero-area faces")
    t = 1.0
    if folded(1.0):
        # blend towards the fold-free seed layout: largest fold-free t by bisection
        lo, hi = 0.0, 1.0
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if not folded(mid) else (lo, mid)
        t = lo
        log.warning("stitched flattening folded over; blended with the seed layout (t=%.3f)", t)
    plane = QuadMesh(space.dims, seed_v + t * (v - seed_v))
    plane, _, _ = upright(plane)
    return plane


# -- inner loop ----------------------------------------------------------------

def minimize_F(state: SolverState, schedule: WeightSchedule, max_steps: int = SOLVER_STEPS,
               rel_tol: float | None = None):
    """One quasi-Newton solve over X with frozen correspondences: ``(state, LbfgsResult)``."""
    obj = Objective(state, schedule)
    res = lbfgs(obj, state.pack(), max_steps=max_steps, rel_tol=schedule.eps if rel_tol is None else rel_tol)
    if res.line_search_failed:
        log.warning("line search failed after %d steps; keeping best iterate", res.n_steps)
    return state.unpack(res.x), res


@dataclass
class _Context:
    cloud: PointCloud  # normalised
    camera: CameraIntrinsics
    segments: list
    config: PipelineConfig


def _feature_correspondences(pair: MeshPair, ctx: _Context, use_features: bool):
    if not use_features or not ctx.segments:
        return [], Anchors.empty(), None, np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    lines = lift_segments(ctx.segments, ctx.camera, pair, MeshRayCaster(pair.space))
    lines = merge_feature_lines(lines, pair.plane, straightness_tol=ctx.config.straightness_tol)
    if lines and ctx.config.feature_projection:
        lines, _, _ = project_feature_lines(pair, lines, TriangleGrid(pair.plane.triangle_coords()))
    if not lines:
        return [], Anchors.empty(), None, np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0)
    anchors = Anchors.concat([ln.anchors for ln in lines])
    rays = ViewingRays.concat([ln.rays for ln in lines])
    lop = np.concatenate([np.full(len(ln), i, dtype=np.int64) for i, ln in enumerate(lines)])
    theta = np.array([ln.theta for ln in lines])
    offset = np.array([ln.offset for ln in lines])
    return lines, anchors, rays, lop, theta, offset


def inner_loop(pair: MeshPair, ctx: _Context, schedule: WeightSchedule, round_idx: int,
               diagnostics: list, trace: list):
    """Repeat correspondence refresh + solve until the relative change of F drops below eps.

    Returns ``(pair, lines, valid, converged)``.
    """
    cfg = ctx.config
    use_features = schedule.lam[4] > 0 or schedule.lam[5] > 0
    history: list[float] = []
    rises = 0
    lines: list[FeatureLine] = []
    valid = ctx.cloud.valid.copy()
    converged = False
    for it in range(1, schedule.max_iter + 1):
        t0 = time.perf_counter()
        prox = MeshProximity(pair.space)
        anchors_all, foot, normals, dist = prox.query(ctx.cloud.points, cutoff=cfg.phi)
        valid = dist <= cfg.phi
        if not valid.any():
            raise CloudError(f"noise filter removed every point (phi={cfg.phi})")
        lines, fa, rays, lop, theta, offset = _feature_correspondences(pair, ctx, use_features)
        corr = Correspondences(ctx.cloud.points[valid], anchors_all[np.flatnonzero(valid)], normals[valid])
        if rays is not None:
            corr = replace(corr, feature_anchors=fa, rays=rays, line_of_point=lop)
        state = SolverState(pair, theta, offset, corr)
        state, res = minimize_F(state, schedule, cfg.solver_steps, cfg.rel_tol)
        pair = state.pair
        lines = [replace(ln, theta=float(t), offset=float(c)) for ln, t, c in zip(lines, state.theta, state.offset)]
        rep = total_objective(state, schedule)
        f = rep.total
        for step, fv in enumerate(res.history):
            trace.append({"round": round_idx, "iter": it, "step": step, "F": fv})
        diagnostics.append({"round": round_idx, "iter": it, "F_start": res.history[0], "F": f, **rep.terms,
                            "lambda_line": schedule.lam[4], "lambda_ray": schedule.lam[5],
                            "n_valid": int(valid.sum()), "n_lines": len(lines), "solver_steps": res.n_steps,
                            "solver_status": res.status, "wall_time": time.perf_counter() - t0})
        log.info("round %d iter %d: F=%.6g steps=%d valid=%d lines=%d", round_idx, it, f, res.n_steps,
                 int(valid.sum()), len(lines))
        if history:
            prev = history[-1]
            rises = rises + 1 if f > prev else 0
            if rises >= DIVERGENCE_WINDOW:
                raise PipelineDiverged(f"F increased over {DIVERGENCE_WINDOW} consecutive iterations in round "
                                       f"{round_idx}")
            if abs(f - prev) <= schedule.eps * abs(prev):
                history.append(f)
                converged = True
                break
        history.append(f)
    if not converged:
        log.warning("round %d stopped at the iteration cap (%d)", round_idx, schedule.max_iter)
    return pair, lines, valid, converged


# -- top level -----------------------------------------------------------------------

def _boundary_segments(segments):
    return [s for s in segments if s.cls == "boundary"]


def initialize(inputs: PipelineInputs, config: PipelineConfig, cloud: PointCloud) -> MeshPair:
    """Pixel grid -> depth lift -> stitched unfolding, before any refinement."""
    bnd = _boundary_segments(inputs.segments)
    if bnd:
        bounds = bnd
    elif inputs.image_size is not None:
        bounds = (0.0, 0.0, float(inputs.image_size[0] - 1), float(inputs.image_size[1] - 1))
    else:
        pts = cloud.points[cloud.points[:, 2] > 0]
        cam = inputs.camera
        pix = np.column_stack([cam.fu * pts[:, 0] / pts[:, 2] + cam.cu, cam.fv * pts[:, 1] / pts[:, 2] + cam.cv])
        bounds = (*pix.min(axis=0), *pix.max(axis=0))
    if bnd and config.bounds_margin > 0:
        pts = np.concatenate([b.pixels for b in bnd])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        pad = config.bounds_margin * (hi - lo)
        bounds = (*(lo - pad), *(hi + pad))
    image_mesh = init_image_mesh(bounds, config.dims)
    space = init_space_mesh(image_mesh, cloud, inputs.camera, config.k)
    plane = init_plane_mesh(space, image_mesh, config.unfold_iterations)
    return MeshPair(space, plane)


def refine_initial(pair: MeshPair, ctx: _Context, schedule: WeightSchedule, diagnostics: list, trace: list):
    """Inner loop with the feature weights set to zero, then re-upright the flattening."""
    pair, _, valid, _ = inner_loop(pair, ctx, schedule.without_features(), 0, diagnostics, trace)
    ref = None
    bnd = _boundary_segments(ctx.segments)
    if bnd:
        lifted = lift_segments(bnd, ctx.camera, pair, MeshRayCaster(pair.space))
        if lifted:
            ref = np.concatenate([ln.plane_points(pair.plane) for ln in lifted])
    plane, _, _ = upright(pair.plane, ref if ref is not None and len(ref) >= 2 else None)
    return MeshPair(pair.space, plane), valid


def run(config: PipelineConfig, inputs: PipelineInputs) -> RunResult:
    """Initialise, refine, then ``config.rounds`` rounds of inner loops interleaved with subdivision."""
    cloud = normalize_cloud(inputs.cloud)
    ctx = _Context(cloud, inputs.camera, list(inputs.segments), config)
    diagnostics: list = []
    trace: list = []
    schedule = config.schedule
    pair = initialize(inputs, config, cloud)
    lines: list = []
    valid = cloud.valid
    result = RunResult(pair, cloud.scale, lines, valid, schedule, diagnostics, trace, "running")
    try:
        if config.refine:
            pair, valid = refine_initial(pair, ctx, schedule, diagnostics, trace)
        for r in range(1, config.rounds + 1):
            pair, lines, valid, _ = inner_loop(pair, ctx, schedule, r, diagnostics, trace)
            result = RunResult(pair, cloud.scale, lines, valid, schedule, diagnostics, trace, "running")
            if r < config.rounds:
                pair = subdivide_pair(pair)
                schedule = schedule.escalated()
    except PipelineDiverged as exc:
        result.status = "diverged"
        exc.result = result
        raise
    except EnergyError as exc:
        raise PipelineError(str(exc)) from exc
    result.status = "ok"
    return result


def write_diagnostics(path, rows: list, columns=DIAG_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_diagnostics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config files ----------------------------------------------------------------------

_CONFIG_KEYS = {
    "eps": ("schedule", float), "max_iter": ("schedule", int), "rounds": ("schedule", int),
    "escalation": ("schedule", float), "phi": ("config", float), "k": ("config", int),
    "straightness_tol": ("config", float), "solver_steps": ("config", int), "unfold_iterations": ("config", int),
    "bounds_margin": ("config", float),
}
_BOOL_KEYS = ("feature_projection", "refine")


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Key-value overrides, one per line: ``eps 0.01``, ``lambda 1 1 1e-4 0.1 1 1``, ``dims 20 30`` ...

    Also accepted: ``lambda1`` .. ``lambda6``, ``max_iter`` (Q), ``solver_rel_tol`` (``none`` for eps),
    ``feature_projection`` and ``refine`` (0/1).
    """
    base = base or PipelineConfig()
    sched_kw: dict = {}
    cfg_kw: dict = {}
    lam = list(base.schedule.lam)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].replace("=", " ").strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            if key in _CONFIG_KEYS:
                where, typ = _CONFIG_KEYS[key]
                (sched_kw if where == "schedule" else cfg_kw)[key] = typ(vals[0])
            elif key == "lambda":
                if len(vals) != 6:
                    raise PipelineError(f"line {lineno}: lambda needs six values")
                lam = [float(v) for v in vals]
            elif key.startswith("lambda") and key[6:].isdigit() and 1 <= int(key[6:]) <= 6:
                lam[int(key[6:]) - 1] = float(vals[0])
            elif key == "dims":
                cfg_kw["dims"] = (int(vals[0]), int(vals[1]))
            elif key == "solver_rel_tol":
                cfg_kw["solver_rel_tol"] = None if vals[0].lower() == "none" else float(vals[0])
            elif key in _BOOL_KEYS:
                cfg_kw[key] = vals[0].lower() in ("1", "true", "yes", "on")
            else:
                raise PipelineError(f"line {lineno}: unknown config key {key!r}")
        except (IndexError, ValueError) as exc:
            raise PipelineError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    try:
        schedule = replace(base.schedule, lam=tuple(lam), **sched_kw)
    except EnergyError as exc:
        raise PipelineError(str(exc)) from None
    return replace(base, schedule=schedule, **cfg_kw)


def read_config(path) -> PipelineConfig:
    with open(path) as fh:
        return parse_config(fh.read())

"""Command-line entry points: rectify, synth, eval, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .camera import CameraError, read_intrinsics
from .energies import TERMS
from .features import FeatureError, read_segments
from .geometry import MeshError, MeshPair, read_obj, write_obj
from .pipeline import (DIAG_COLUMNS, TRACE_COLUMNS, PipelineConfig, PipelineDiverged, PipelineError, PipelineInputs,
                       read_config, run, write_diagnostics)
from .pointcloud import CloudError, load_cloud
from .rectify import (DEFAULT_BACKGROUND, DEFAULT_RESOLUTION, REGION_MODES, RectifyError, output_region, read_image,
                      render, write_image)
from .synth import PRESETS, SceneError, read_scene, write_bundle

log = logging.getLogger("isorect")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3

INPUT_ERRORS = (OSError, CameraError, CloudError, FeatureError, MeshError, RectifyError, SceneError, PipelineError)


def _background(text: str):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("background must be R,G,B or a single grey level") from None
    if len(vals) not in (1, 3) or not all(0 <= v <= 255 for v in vals):
        raise argparse.ArgumentTypeError("background must be R,G,B or a single grey level in 0..255")
    return vals * 3 if len(vals) == 1 else vals


def _write_outputs(out: Path, result, cam, image, region_mode: str, resolution: int, background) -> None:
    pair = result.pair_original_units()
    write_obj(out / "space.obj", pair.space)
    write_obj(out / "plane.obj", pair.plane)
    np.savetxt(out / "valid.txt", result.valid.astype(np.int64), fmt="%d")
    write_diagnostics(out / "diag.csv", result.diagnostics, DIAG_COLUMNS)
    write_diagnostics(out / "solve_trace.csv", result.trace, TRACE_COLUMNS)
    with open(out / "lines.txt", "w") as fh:
        for ln in result.lines:
            fh.write(f"{ln.cls} {ln.orientation} {ln.theta!r} {ln.offset / result.scale!r} {len(ln)}\n")
    if image is not None:
        region = output_region(result.lines, pair.plane, region_mode)
        write_image(out / "rectified.png", render(pair, cam, image, region, resolution, background))


def cmd_rectify(args) -> int:
    try:
        cam = read_intrinsics(args.cam)
        cloud = load_cloud(args.cloud)
        image = read_image(args.image)
        segments = read_segments(args.segments) if args.segments else []
        config = read_config(args.config) if args.config else PipelineConfig()
        if args.no_projection:
            config = replace(config, feature_projection=False)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = PipelineInputs(cloud, cam, segments, (image.shape[1], image.shape[0]))
    try:
        result = run(config, inputs)
    except PipelineDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.result is not None:
            _write_outputs(out, exc.result, cam, None, args.region, args.resolution, args.background)
        return EXIT_DIVERGED
    except (PipelineError, CloudError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    _write_outputs(out, result, cam, image, args.region, args.resolution, args.background)
    print(f"wrote {out / 'rectified.png'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        if args.spec:
            scene = read_scene(args.spec)
        else:
            scene = PRESETS[args.preset]()
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.outliers is not None:
            overrides["outliers"] = args.outliers
        scene = replace(scene, **overrides)
        out = write_bundle(scene, args.out)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(f"wrote scene bundle to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_scene

    bundle, result = Path(args.bundle), Path(args.result)
    try:
        scene = read_scene(bundle / "scene.txt")
        pair = MeshPair(read_obj(result / "space.obj", planar=False), read_obj(result / "plane.obj", planar=True))
        valid = labels = None
        if (result / "valid.txt").exists() and (bundle / "labels.txt").exists():
            valid = np.loadtxt(result / "valid.txt", dtype=np.int64, ndmin=1).astype(bool)
            labels = np.loadtxt(bundle / "labels.txt", dtype=np.int64, ndmin=1)
            if len(valid) != len(labels):
                raise MeshError(f"result has {len(valid)} validity flags but the bundle has {len(labels)} points")
        metrics = evaluate_scene(scene, pair, valid, labels)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    checks = run_gradcheck(args.seed, args.pairs, rtol=args.rtol, atol=args.atol,
                           sign_error_term=args.inject_sign_error)
    failed = [c for c in checks if not c.passed]
    for term in TERMS:
        worst = max((c for c in checks if c.term == term), key=lambda c: c.max_abs_err)
        print(f"{term:8s} max|g-fd| = {worst.max_abs_err:.3e}  {'ok' if all(c.passed for c in checks if c.term == term) else 'FAIL'}")
    if failed:
        w = max(failed, key=lambda c: c.max_abs_err)
        print(f"FAIL: term {w.term} (state seed {w.seed}) component {w.worst_index}: analytic {w.analytic:.6e} "
              f"vs finite difference {w.numeric:.6e}", file=sys.stderr)
        return EXIT_FAIL
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isorect", description=__doc__)
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rectify", help="fit the mesh pair and write the rectified image")
    r.add_argument("--cloud", required=True, help="point cloud, one 'x y z' per line")
    r.add_argument("--cam", required=True, help="intrinsics file with f, ku, kv, cu, cv")
    r.add_argument("--image", required=True, help="reference image (PNG or PPM)")
    r.add_argument("--segments", help="feature segments, one 'class u1 v1 u2 v2 ...' per line")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--config", help="key-value overrides of the pipeline parameters")
    r.add_argument("--region", choices=REGION_MODES, default="boundary")
    r.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION, help="long side of the output in pixels")
    r.add_argument("--background", type=_background, default=DEFAULT_BACKGROUND, help="R,G,B fill outside the mesh")
    r.add_argument("--no-projection", action="store_true", help="disable feature line projection")
    r.set_defaults(func=cmd_rectify)

    s = sub.add_parser("synth", help="generate a synthetic folded-sheet scene bundle")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="scene description file")
    g.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--outliers", type=int, help="number of box outliers to add")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="compare a rectify result against a synth bundle")
    e.add_argument("--bundle", required=True)
    e.add_argument("--result", required=True)
    e.add_argument("--out", help="write the metrics JSON here as well")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of all energy gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--pairs", type=int, default=10)
    c.add_argument("--rtol", type=float, default=1e-5)
    c.add_argument("--atol", type=float, default=1e-8)
    c.add_argument("--inject-sign-error", choices=TERMS, help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

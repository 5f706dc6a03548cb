import json

import numpy as np
import pytest

from isorect.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main
from isorect.evaluate import evaluate_scene
from isorect.geometry import MeshPair, read_obj, write_obj
from isorect.pipeline import read_diagnostics
from isorect.synth import PRESETS, ground_truth_pair, read_scene

SMALL = "dims 8 11\nrounds 2\n"


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("flat")
    assert main(["synth", "--preset", "flat", "--out", str(out)]) == EXIT_OK
    return out


def _rectify(bundle, out, *extra, config_text=SMALL):
    cfg = out.parent / f"{out.name}.cfg"
    cfg.write_text(config_text)
    return main(["rectify", "--cloud", str(bundle / "cloud.xyz"), "--cam", str(bundle / "cam.txt"),
                 "--image", str(bundle / "ref.png"), "--out", str(out), "--config", str(cfg),
                 "--resolution", "200", *extra])


def test_rectify_writes_outputs(bundle, tmp_path):
    out = tmp_path / "r"
    assert _rectify(bundle, out, "--segments", str(bundle / "segments.txt")) == EXIT_OK
    for name in ("rectified.png", "diag.csv", "solve_trace.csv", "space.obj", "plane.obj", "valid.txt", "lines.txt"):
        assert (out / name).exists(), name
    rounds = {r["round"] for r in read_diagnostics(out / "diag.csv")}
    assert rounds == {"0", "1", "2"}
    assert (out / "lines.txt").read_text().strip()


def test_rectify_without_segments(bundle, tmp_path):
    out = tmp_path / "r"
    assert _rectify(bundle, out) == EXIT_OK
    assert (out / "rectified.png").exists()
    assert (out / "lines.txt").read_text() == ""


@pytest.mark.parametrize("text", ["1.0 1000 -5 400\n", "f 1\nku -5\nkv 1100\ncu 400\ncv 600\n"])
def test_bad_intrinsics_exit_code(bundle, tmp_path, text):
    cam = tmp_path / "cam.txt"
    cam.write_text(text)
    out = tmp_path / "r"
    code = main(["rectify", "--cloud", str(bundle / "cloud.xyz"), "--cam", str(cam), "--image",
                 str(bundle / "ref.png"), "--out", str(out)])
    assert code == EXIT_INPUT
    assert not out.exists()


def test_bad_config_exit_code(bundle, tmp_path):
    out = tmp_path / "r"
    assert _rectify(bundle, out, config_text="colour 3\n") == EXIT_INPUT
    assert not out.exists()


def test_synth_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["synth", "--preset", "single-fold", "--seed", "5", "--out", str(out)]) == EXIT_OK
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_synth_outliers_flag(tmp_path):
    out = tmp_path / "o"
    assert main(["synth", "--preset", "flat", "--outliers", "1000", "--out", str(out)]) == EXIT_OK
    n = PRESETS["flat"]().n_points
    assert len(np.loadtxt(out / "cloud.xyz")) == n + 1000
    assert (np.loadtxt(out / "labels.txt") == 0).sum() == 1000


def test_synth_rejects_bad_spec(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("texture marble\n")
    assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_eval_matches_library(bundle, tmp_path, capsys):
    out = tmp_path / "r"
    assert _rectify(bundle, out, "--segments", str(bundle / "segments.txt")) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--bundle", str(bundle), "--result", str(out), "--out", str(tmp_path / "m.json")]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out)
    pair = MeshPair(read_obj(out / "space.obj", planar=False), read_obj(out / "plane.obj", planar=True))
    valid = np.loadtxt(out / "valid.txt").astype(bool)
    expected = evaluate_scene(read_scene(bundle / "scene.txt"), pair, valid, np.loadtxt(bundle / "labels.txt"))
    assert printed == json.loads(json.dumps(expected))
    assert json.loads((tmp_path / "m.json").read_text()) == printed
    assert list(printed) == sorted(printed)


def test_eval_of_ground_truth_is_zero(bundle, tmp_path, capsys):
    scene = read_scene(bundle / "scene.txt")
    pair = ground_truth_pair(scene, (20, 30))
    res = tmp_path / "truth"
    res.mkdir()
    write_obj(res / "space.obj", pair.space)
    write_obj(res / "plane.obj", pair.plane)
    capsys.readouterr()
    assert main(["eval", "--bundle", str(bundle), "--result", str(res)]) == EXIT_OK
    m = json.loads(capsys.readouterr().out)
    assert m["displacement_error"] < 1e-9
    assert m["worst_line_straightness"] < 1e-9
    assert m["iso_residual_mean"] < 1e-12


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--pairs", "2"]) == EXIT_OK
    assert main(["gradcheck", "--pairs", "2", "--inject-sign-error", "fair_mp"]) == EXIT_FAIL
    err = capsys.readouterr().err
    assert "fair_mp" in err
    # zero tolerance cannot be met by finite differences
    assert main(["gradcheck", "--pairs", "1", "--rtol", "0", "--atol", "0"]) == EXIT_FAIL

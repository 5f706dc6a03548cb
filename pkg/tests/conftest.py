"""Session fixtures: synthetic bundles and full CLI runs shared by the integration and acceptance tests."""

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from isorect.cli import main  # noqa: E402
from isorect.synth import PRESETS, write_bundle  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@dataclass
class Run:
    bundle: Path
    out: Path
    code: int
    seconds: float


_bundles: dict = {}


def _bundle(factory, preset: str) -> Path:
    if preset not in _bundles:
        _bundles[preset] = write_bundle(PRESETS[preset](), factory.mktemp(preset))
    return _bundles[preset]


def _rectify(factory, preset: str, name: str, *extra, segments: bool = True) -> Run:
    bundle = _bundle(factory, preset)
    out = factory.mktemp(name)
    argv = ["rectify", "--cloud", str(bundle / "cloud.xyz"), "--cam", str(bundle / "cam.txt"),
            "--image", str(bundle / "ref.png"), "--out", str(out), *extra]
    if segments:
        argv += ["--segments", str(bundle / "segments.txt")]
    t = time.perf_counter()
    code = main(argv)
    return Run(bundle, out, code, time.perf_counter() - t)


@pytest.fixture(scope="session")
def single_fold_run(tmp_path_factory):
    return _rectify(tmp_path_factory, "single-fold", "single_fold")


@pytest.fixture(scope="session")
def single_fold_rerun(tmp_path_factory, single_fold_run):
    return _rectify(tmp_path_factory, "single-fold", "single_fold_again")


@pytest.fixture(scope="session")
def outlier_run(tmp_path_factory):
    return _rectify(tmp_path_factory, "single-fold-outliers", "outliers")


@pytest.fixture(scope="session")
def two_fold_features(tmp_path_factory):
    return _rectify(tmp_path_factory, "two-fold-ruled", "two_fold_features")


@pytest.fixture(scope="session")
def two_fold_plain(tmp_path_factory):
    return _rectify(tmp_path_factory, "two-fold-ruled", "two_fold_plain", segments=False)


@pytest.fixture(scope="session")
def two_fold_no_projection(tmp_path_factory):
    return _rectify(tmp_path_factory, "two-fold-ruled", "two_fold_no_projection", "--no-projection")


@pytest.fixture(scope="session")
def single_fold_plain(tmp_path_factory):
    return _rectify(tmp_path_factory, "single-fold", "single_fold_plain", segments=False)

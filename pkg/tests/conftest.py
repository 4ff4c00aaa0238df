import warnings

import numpy as np
import pytest

from clearsplat.synth import RECIPES, default_scene, make_dataset

from helpers import small_cameras

warnings.filterwarnings("ignore", module="numba")

# -- acceptance summary --------------------------------------------------------
# test_acceptance.py tests attach `criterion` (a label) and optionally `detail`
# to their node via record_property; we print one line per criterion at the end.

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    label = props.get("criterion")
    if label is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        ok = report.outcome == "passed"
        prev = _CRITERIA.get(label)
        detail = props.get("detail", "")
        _CRITERIA[label] = (ok and (prev is None or prev[0]), detail or (prev[1] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split()[0])):
        ok, detail = _CRITERIA[label]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {label}" + (f"  ({detail})" if detail else ""))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 views at 48x48 with snow + lens droplets (fast, for unit tests)."""
    out = tmp_path_factory.mktemp("ds_small")
    return make_dataset(default_scene(), small_cameras(), RECIPES["snow+lens"], out, seed=7, n_points=400)


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds_clean")
    return make_dataset(default_scene(), small_cameras(), RECIPES["none"], out, seed=7, n_points=400)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

import functools

import numpy as np
import pytest

from polardepth import scenes
from polardepth.geometry import relative_pose
from polardepth.simulator import render_sequence


# Verdict lines from the acceptance tests, repeated in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@functools.lru_cache(maxsize=None)
def rendered(name: str, width: int | None = None, height: int | None = None):
    """Render a benchmark sequence once per test session."""
    scene, K, poses = scenes.benchmark(name, width, height)
    return render_sequence(scene, K, poses), K


def problem(name, width=None, height=None, rows=slice(None), cols=slice(None)):
    """(target, sources, polar, camera, gt disparity) for the middle view, optionally cropped."""
    views, K = rendered(name, width, height)
    t = len(views) // 2
    tv = views[t]
    r0 = rows.start or 0
    c0 = cols.start or 0
    polar = tv.polar.crop(rows, cols)
    gt = tv.disparity_gt.crop(rows, cols)
    Kc = K if (rows == slice(None) and cols == slice(None)) else K.crop(r0, c0, *gt.shape)
    sources = [(v.polar.iota[rows, cols], relative_pose(tv.pose, v.pose))
               for i, v in enumerate(views) if i != t]
    return polar.iota, sources, polar, Kc, gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

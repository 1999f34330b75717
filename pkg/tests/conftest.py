import math

import numpy as np
import pytest

from vlpslam import _accel
from vlpslam.mcl import build_likelihood_field
from vlpslam.world import build_lab_world, load_world


@pytest.fixture(scope="session")
def lab():
    return load_world()


@pytest.fixture(scope="session")
def lab_field(lab):
    return build_likelihood_field(lab.grid)


@pytest.fixture(params=[True, False], ids=["numba", "numpy"])
def backend(request):
    prev = _accel.use_numba(request.param)
    yield request.param
    _accel.use_numba(prev)


def segment_raycast(rects, x, y, angle, max_range):
    """Analytic first intersection of a ray with axis-aligned boxes (slab method)."""
    dx, dy = math.cos(angle), math.sin(angle)
    best = max_range
    for x0, y0, x1, y1 in rects:
        tmin, tmax = -math.inf, math.inf
        for o, d, lo, hi in ((x, dx, x0, x1), (y, dy, y0, y1)):
            if abs(d) < 1e-15:
                if not lo <= o <= hi:
                    tmin, tmax = math.inf, -math.inf
                continue
            a, b = (lo - o) / d, (hi - o) / d
            tmin, tmax = max(tmin, min(a, b)), min(tmax, max(a, b))
        if tmin <= tmax and tmax >= 0:
            best = min(best, max(tmin, 0.0))
    return best


@pytest.fixture(scope="session")
def rng_seeds():
    return list(range(20))

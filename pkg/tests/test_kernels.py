"""The numba kernels and their numpy fallbacks must agree."""
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from vlpslam import _accel, kernels


def both(fn):
    prev = _accel.use_numba(True)
    try:
        a = fn()
        _accel.use_numba(False)
        b = fn()
    finally:
        _accel.use_numba(prev)
    return a, b


def _random_grid(seed, shape=(60, 70), density=0.08):
    rng = np.random.default_rng(seed)
    occ = rng.random(shape) < density
    occ[[0, -1], :] = True
    occ[:, [0, -1]] = True
    return occ, rng


def _free_point(occ, rng, origin):
    iy, ix = np.nonzero(~occ)
    k = rng.integers(len(ix))
    ox, oy, _, res = origin
    return ox + (ix[k] + rng.uniform(0.1, 0.9)) * res, oy + (iy[k] + rng.uniform(0.1, 0.9)) * res


ORIGINS = [(0.0, 0.0, 0.0, 0.05), (-1.3, 0.7, 0.0, 0.05), (0.4, -0.2, 0.3, 0.1)]


@pytest.mark.parametrize("seed", range(10))
def test_raycast_backends_agree(seed):
    occ, rng = _random_grid(seed)
    org = ORIGINS[seed % len(ORIGINS)]
    x, y = _free_point(occ, rng, org)
    angles = np.sort(rng.uniform(-math.pi, math.pi, 361))
    angles[:4] = [0.0, math.pi / 2, math.pi, -math.pi / 2]
    (ra, ha), (rb, hb) = both(lambda: kernels.raycast(occ, org, x, y, angles, 2.5))
    assert np.array_equal(ha, hb)
    assert np.allclose(ra, rb, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_mark_rays_backends_agree(seed):
    occ, rng = _random_grid(seed)
    org = ORIGINS[seed % len(ORIGINS)]
    x, y = _free_point(occ, rng, org)
    angles = rng.uniform(-math.pi, math.pi, 200)
    ranges = rng.uniform(0.0, 3.0, 200)
    hit = rng.random(200) < 0.7
    a, b = both(lambda: kernels.mark_rays(occ.shape, org, x, y, angles, ranges, hit))
    assert a.dtype == b.dtype
    assert np.array_equal(a, b)
    assert set(np.unique(a)) <= {0, 1, 2}


@pytest.mark.parametrize("seed", range(8))
def test_edt_backends_match_scipy(seed):
    rng = np.random.default_rng(seed)
    occ = rng.random((rng.integers(5, 50), rng.integers(5, 50))) < rng.uniform(0.01, 0.3)
    occ[rng.integers(occ.shape[0]), rng.integers(occ.shape[1])] = True
    a, b = both(lambda: kernels.edt_squared(occ))
    oracle = ndimage.distance_transform_edt(~occ) ** 2
    assert np.array_equal(a, b)
    assert np.allclose(a, oracle, rtol=0, atol=1e-9)


def test_edt_empty_grid():
    a, b = both(lambda: kernels.edt_squared(np.zeros((6, 9), dtype=bool)))
    assert np.all(a >= kernels.BIG) and np.all(b >= kernels.BIG)


@pytest.mark.parametrize("interpolate", [False, True], ids=["nearest", "bilinear"])
@pytest.mark.parametrize("seed", range(5))
def test_score_backends_agree(seed, interpolate):
    rng = np.random.default_rng(seed)
    table = rng.normal(size=(40, 50))
    org = ORIGINS[seed % len(ORIGINS)]
    poses = np.column_stack([org[0] + rng.uniform(0, 2.5, 64), org[1] + rng.uniform(0, 2.0, 64),
                             rng.uniform(-math.pi, math.pi, 64)])
    pts = rng.uniform(-2.0, 2.0, (90, 2))
    a, b = both(lambda: kernels.score_poses(table, -7.0, org, poses, pts, interpolate))
    assert a.shape == (64,)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)


def test_score_nearest_oracle(backend):
    table = np.arange(12.0).reshape(3, 4)
    org = (0.0, 0.0, 0.0, 1.0)
    pts = np.array([[0.5, 0.5], [3.5, 2.5], [10.0, 0.0]])
    s = kernels.score_poses(table, -100.0, org, [(0.0, 0.0, 0.0)], pts)
    assert s[0] == table[0, 0] + table[2, 3] - 100.0


@pytest.mark.parametrize("seed", range(6))
def test_rollout_backends_agree(seed):
    occ, rng = _random_grid(seed, density=0.02)
    org = ORIGINS[seed % len(ORIGINS)]
    d2 = ndimage.distance_transform_edt(~occ)
    blocked = d2 < 2.5
    clear = d2 * org[3]
    x, y = _free_point(blocked, rng, org)
    vs = np.repeat(np.linspace(0.0, 0.22, 11), 21)
    ws = np.tile(np.linspace(-2.0, 2.0, 21), 11)
    (ea, ca, ma), (eb, cb, mb) = both(lambda: kernels.rollout(blocked, clear, org, (x, y, 0.7), vs, ws, 0.05, 30))
    assert np.array_equal(ca, cb)
    assert np.allclose(ea, eb, rtol=0, atol=1e-12)
    assert np.allclose(ma, mb, rtol=0, atol=1e-12)


def test_env_flag_disables_numba():
    code = "from vlpslam import _accel; print(_accel.numba_enabled())"
    env = dict(os.environ, VLPSLAM_NUMBA="0")
    r = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert r.stdout.strip() == "False"


def test_use_numba_returns_previous():
    prev = _accel.use_numba(False)
    try:
        assert _accel.use_numba(True) is False
        assert _accel.numba_enabled()
    finally:
        _accel.use_numba(prev)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlpslam.geometry import Pose2D, wrap_angle
from vlpslam.grid import OccupancyGrid
from vlpslam.mcl import (MclParams, MonteCarloLocalizer, ParticleSet, build_likelihood_field, estimate, initialize,
                         initialize_uniform, predict, resample, systematic_indices, weight)
from vlpslam.messages import LidarScan, OdometryDelta
from vlpslam.world import LidarSpec, OdometryNoise, simulate_lidar

ZERO = OdometryNoise(0, 0, 0, 0)


def _toy_grid(seed, frac=0.05):
    rng = np.random.default_rng(seed)
    occ = rng.random((20, 20)) < frac
    occ[rng.integers(20), rng.integers(20)] = True
    return OccupancyGrid.from_occupancy(occ, 0.05), occ


@pytest.mark.parametrize("seed", range(5))
def test_field_matches_brute_force(seed):
    grid, occ = _toy_grid(seed)
    f = build_likelihood_field(grid, sigma=0.1, max_dist=0.5)
    oy, ox = np.nonzero(occ)
    expect = np.empty(occ.shape)
    for iy in range(20):
        for ix in range(20):
            d2 = min((ix - a) ** 2 + (iy - b) ** 2 for a, b in zip(ox, oy))
            d = min(math.sqrt(d2) * 0.05, 0.5)
            expect[iy, ix] = d
    np.testing.assert_array_equal(f.values, np.exp(-expect * expect / (2 * 0.1 * 0.1)))
    assert np.all(f.values[occ] == 1.0)
    assert np.all((f.values > 0) & (f.values <= 1))


def test_field_cap():
    occ = np.zeros((40, 40), bool)
    occ[0, 0] = True
    f = build_likelihood_field(OccupancyGrid.from_occupancy(occ, 0.05), sigma=0.1, max_dist=0.5)
    assert f.values[39, 39] == pytest.approx(math.exp(-0.5 ** 2 / 0.02), rel=1e-14)
    assert f.values[39, 39] == f.cap_value


def test_field_requires_occupied():
    with pytest.raises(ValueError):
        build_likelihood_field(OccupancyGrid.empty(10, 10, 0.05))
    with pytest.raises(ValueError):
        build_likelihood_field(_toy_grid(0)[0], sigma=0.0)


def _cloud(n=50, seed=0):
    rng = np.random.default_rng(seed)
    poses = np.column_stack([rng.uniform(0, 5, n), rng.uniform(0, 5, n), rng.uniform(-math.pi, math.pi, n)])
    w = rng.random(n)
    return ParticleSet(poses, w / w.sum())


def test_predict_zero():
    s = _cloud()
    out = predict(s, (0.0, 0.0, 0.0), ZERO, np.random.default_rng(0))
    np.testing.assert_array_equal(out.poses, s.poses)
    np.testing.assert_array_equal(out.weights, s.weights)


def test_predict_unit_forward():
    s = _cloud()
    out = predict(s, (1.0, 0.0, 0.0), ZERO, np.random.default_rng(0))
    np.testing.assert_allclose(out.poses[:, 0], s.poses[:, 0] + np.cos(s.poses[:, 2]), atol=1e-12)
    np.testing.assert_allclose(out.poses[:, 1], s.poses[:, 1] + np.sin(s.poses[:, 2]), atol=1e-12)
    np.testing.assert_allclose(out.poses[:, 2], s.poses[:, 2], atol=1e-12)


def test_predict_monte_carlo_mean():
    noise = OdometryNoise()
    base = Pose2D(1.0, 2.0, 0.7)
    n = 100_000
    s = ParticleSet(np.tile(base.as_array(), (n, 1)), np.full(n, 1.0 / n))
    delta = (0.2, 0.03, 0.1)
    out = predict(s, delta, noise, np.random.default_rng(3))
    # analytic expectation of the rot-trans-rot sample: E[t cos r1] = t cos(rot1) exp(-var1 / 2)
    trans = math.hypot(delta[0], delta[1])
    rot1 = math.atan2(delta[1], delta[0])
    rot2 = delta[2] - rot1
    a1, a2 = noise.a1, noise.a2
    var1 = a1 * rot1 ** 2 + a2 * trans ** 2
    shrink = math.exp(-var1 / 2)
    lx, ly = trans * math.cos(rot1) * shrink, trans * math.sin(rot1) * shrink
    c, s_ = math.cos(base.theta), math.sin(base.theta)
    ex = base.x + c * lx - s_ * ly
    ey = base.y + s_ * lx + c * ly
    p = out.poses
    se = p.std(axis=0) / math.sqrt(n)
    assert abs(p[:, 0].mean() - ex) < 3 * se[0] + 1e-12
    assert abs(p[:, 1].mean() - ey) < 3 * se[1] + 1e-12
    dth = wrap_angle(float(np.mean(wrap_angle_arr(p[:, 2] - base.theta))) - (rot1 + rot2))
    assert abs(dth) < 3 * se[2]
    np.testing.assert_array_equal(out.weights, s.weights)


def wrap_angle_arr(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _scan_at(lab, pose):
    return simulate_lidar(pose, lab.occupancy, lab.grid.origin_params(), LidarSpec(), None)


def test_weight_normalised(lab, lab_field):
    s = _cloud(200)
    s.poses[:, :2] = np.column_stack([np.linspace(0, 9, 200), np.full(200, 2.6)])
    out = weight(s, _scan_at(lab, Pose2D(3.0, 2.6, 0.2)), lab_field)
    assert abs(out.weights.sum() - 1.0) < 1e-9
    assert np.all(out.weights >= 0)


def test_truth_beats_offsets(lab, lab_field):
    truth = Pose2D(3.0, 2.6, 0.3)
    scan = _scan_at(lab, truth)
    offs = []
    for dx in np.arange(-0.3, 0.301, 0.05):
        for dy in np.arange(-0.3, 0.301, 0.05):
            if math.hypot(dx, dy) >= 0.15 - 1e-9:
                for dth in (-0.1, 0.0, 0.1):
                    offs.append((truth.x + dx, truth.y + dy, truth.theta + dth))
    poses = np.vstack([truth.as_array(), np.array(offs)])
    s = ParticleSet(poses, np.full(len(poses), 1.0 / len(poses)))
    w = weight(s, scan, lab_field).weights
    assert w[0] >= w[1:].max()


def test_identical_particles_stay_uniform(lab, lab_field):
    n = 10
    s = ParticleSet(np.tile([3.0, 2.6, 0.0], (n, 1)), np.full(n, 1.0 / n))
    out = weight(s, _scan_at(lab, Pose2D(3.1, 2.5, 0.0)), lab_field)
    np.testing.assert_allclose(out.weights, 1.0 / n, rtol=1e-12)


def test_no_return_scan_keeps_prior(lab_field):
    s = _cloud()
    scan = LidarScan(0.0, np.full(360, 3.5), np.zeros(360, bool))
    out = weight(s, scan, lab_field)
    np.testing.assert_allclose(out.weights, s.weights, rtol=1e-12)
    assert not out.degenerate


def test_underflow_flags_degenerate(lab, lab_field):
    s = ParticleSet(np.array([[3.0, 2.6, 0.0], [8.0, 0.0, 1.0]]), np.array([0.5, 0.5]))
    params = MclParams(z_rand=0.0, sigma=0.1, beam_stride=1)
    field = build_likelihood_field(lab.grid, sigma=0.001, max_dist=0.5)
    out = weight(s, _scan_at(lab, Pose2D(1.0, 8.0, 0.0)), field, params)
    assert out.degenerate
    np.testing.assert_array_equal(out.weights, [0.5, 0.5])


def test_systematic_enumeration():
    w = np.array([0.5, 0.25, 0.25])
    for u0 in np.linspace(0, 0.25, 101, endpoint=False):
        idx = systematic_indices(w, u0, 4)
        assert np.bincount(idx, minlength=3).tolist() == [2, 1, 1]


def test_resample_uniform_untouched():
    n = 20
    s = ParticleSet(np.random.default_rng(0).random((n, 3)), np.full(n, 1.0 / n))
    assert resample(s, np.random.default_rng(0)) is s


def test_resample_one_hot():
    s = _cloud(30)
    s.weights[:] = 0
    s.weights[7] = 1.0
    out = resample(s, np.random.default_rng(1))
    assert out.count == 30
    np.testing.assert_array_equal(out.poses, np.tile(s.poses[7], (30, 1)))
    np.testing.assert_allclose(out.weights, 1 / 30)


def _skewed_set(n=200):
    rng = np.random.default_rng(0)
    poses = rng.normal(0, 1, (n, 3))
    w = rng.random(n) ** 4
    return ParticleSet(poses, w / w.sum())


def test_resample_unbiased():
    s = _skewed_set()
    target = np.dot(s.weights, s.poses[:, 0])
    drift = []
    for seed in range(100):
        out = resample(s, np.random.default_rng(seed))
        assert out.count == s.count
        drift.append(out.poses[:, 0].mean() - target)
    drift = np.array(drift)
    assert abs(drift.mean()) < 3 * drift.std(ddof=1) / math.sqrt(len(drift))


def test_systematic_expectation_integral():
    # midpoint rule over the single uniform draw: expected copy count of i is n * w_i
    s = _skewed_set()
    n = s.count
    us = (np.arange(20000) + 0.5) / 20000 / n
    counts = np.zeros(n)
    for u in us:
        counts += np.bincount(systematic_indices(s.weights, u, n), minlength=n)
    np.testing.assert_allclose(counts / len(us), n * s.weights, atol=1e-3)


def test_estimate_identical():
    n = 25
    s = ParticleSet(np.tile([1.0, -2.0, 0.4], (n, 1)), np.full(n, 1.0 / n))
    e = estimate(s)
    assert (e.mean.x, e.mean.y, e.mean.theta) == pytest.approx((1.0, -2.0, 0.4), abs=1e-12)
    assert np.abs(e.covariance[:2, :2]).max() < 1e-24
    assert e.effective_sample_size == pytest.approx(n)


def test_estimate_circular_mean():
    a = math.radians(170)
    s = ParticleSet(np.array([[0, 0, a], [0, 0, -a]]), np.array([0.5, 0.5]))
    assert abs(abs(estimate(s).mean.theta) - math.pi) < 1e-12


def test_estimate_summation_oracle():
    s = _cloud(1000, seed=4)
    e = estimate(s)
    w = [float(v) for v in s.weights]
    p = s.poses.tolist()
    mx = math.fsum(wi * q[0] for wi, q in zip(w, p))
    my = math.fsum(wi * q[1] for wi, q in zip(w, p))
    mth = math.atan2(math.fsum(wi * math.sin(q[2]) for wi, q in zip(w, p)),
                     math.fsum(wi * math.cos(q[2]) for wi, q in zip(w, p)))
    r = [(q[0] - mx, q[1] - my, wrap_angle(q[2] - mth)) for q in p]
    cov = [[math.fsum(wi * a[i] * a[j] for wi, a in zip(w, r)) for j in range(3)] for i in range(3)]
    assert (e.mean.x, e.mean.y) == pytest.approx((mx, my), abs=1e-9)
    assert abs(wrap_angle(e.mean.theta - mth)) < 1e-9
    np.testing.assert_allclose(e.covariance, cov, atol=1e-9)
    assert e.effective_sample_size == pytest.approx(1.0 / math.fsum(x * x for x in w), rel=1e-12)


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=60))
def test_estimate_invariants(ws):
    n = len(ws)
    w = np.array(ws) / sum(ws)
    poses = np.random.default_rng(n).normal(0, 1, (n, 3))
    e = estimate(ParticleSet(poses, w))
    assert 1.0 <= e.effective_sample_size <= n + 1e-9
    np.testing.assert_allclose(e.covariance, e.covariance.T)
    assert np.linalg.eigvalsh(e.covariance).min() > -1e-12


def test_initialize_zero_cov():
    s = initialize(Pose2D(1, 2, 3), np.zeros((3, 3)), 50, np.random.default_rng(0))
    np.testing.assert_array_equal(s.poses, np.tile([1, 2, 3], (50, 1)))
    np.testing.assert_allclose(s.weights, 1 / 50)


def test_initialize_non_psd():
    with pytest.raises(ValueError):
        initialize(Pose2D(0, 0, 0), np.diag([1.0, -1.0, 1.0]), 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        initialize(Pose2D(0, 0, 0), np.eye(2), 10, np.random.default_rng(0))


def test_initialize_monte_carlo():
    cov = np.array([[0.01, 0.002, 0], [0.002, 0.02, 0], [0, 0, 0.005]])
    n = 100_000
    pose = Pose2D(1.0, 2.0, 0.5)
    s = initialize(pose, cov, n, np.random.default_rng(5))
    se = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(s.poses.mean(axis=0) - pose.as_array()) < 3 * se)
    e = estimate(s)
    assert abs(e.mean.x - pose.x) < 3 * se[0] and abs(e.mean.y - pose.y) < 3 * se[1]
    np.testing.assert_allclose(e.covariance, cov, atol=5e-4)


def _converge(lab, lab_field, seed):
    rng = np.random.default_rng(seed)
    while True:
        start = Pose2D(rng.uniform(0.0, 8.5), rng.uniform(0.0, 3.3), rng.uniform(-math.pi, math.pi))
        if lab.is_free(start.x, start.y, 0.5):
            break
    loc = MonteCarloLocalizer(lab_field, MclParams(noise=ZERO), np.random.default_rng(seed + 1000))
    loc.initialize(start, np.diag([0.01, 0.01, 0.0025]))
    truth = start
    step = Pose2D(0.02, 0.0, 0.02)
    for k in range(20):
        truth = truth.compose(step)
        loc.add_odometry(OdometryDelta(step.x, step.y, step.theta, k * 0.2, (k - 1) * 0.2))
        est = loc.update(_scan_at(lab, truth))
    return math.hypot(est.mean.x - truth.x, est.mean.y - truth.y)


def test_convergence_ideal(lab, lab_field):
    errs = [_converge(lab, lab_field, seed) for seed in range(100)]
    assert sum(e < 0.05 for e in errs) >= 95


def test_corridor_ambiguity(lab, lab_field):
    corridors = [lab.regions["corridor_1"], lab.regions["corridor_2"]]
    truth = Pose2D(1.1, 8.0, -math.pi / 2)
    scan = _scan_at(lab, truth)
    wrong = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        s = initialize_uniform(corridors, 500, rng, lambda x, y: lab.is_free(x, y, 0.15), heading=truth.theta)
        loc = MonteCarloLocalizer(lab_field, MclParams(noise=ZERO), rng)
        loc.set_particles(s)
        for _ in range(10):
            est = loc.update(scan)
        wrong += est.mean.x > 4.0
    assert wrong > 0

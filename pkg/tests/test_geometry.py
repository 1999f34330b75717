import math

import numpy as np
from hypothesis import given, strategies as st

from vlpslam.geometry import Pose2D, compose_arrays, wrap_angle, wrap_angles

angles = st.floats(-50.0, 50.0, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)


@given(angles)
def test_wrap_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_wrap_pi_boundary():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angles(np.array([-math.pi, math.pi]))[0] == math.pi


@given(st.lists(angles, min_size=1, max_size=20))
def test_vectorised_wrap_matches_scalar(a):
    v = wrap_angles(np.array(a))
    for x, y in zip(a, v):
        assert math.isclose(wrap_angle(x), y, abs_tol=1e-12) or abs(abs(y) - math.pi) < 1e-12


@given(coords, coords, angles)
def test_pose_theta_normalised(x, y, th):
    p = Pose2D(x, y, th)
    assert -math.pi < p.theta <= math.pi


@given(coords, coords, angles, coords, coords, angles)
def test_compose_inverse_roundtrip(x, y, th, a, b, c):
    p, q = Pose2D(x, y, th), Pose2D(a, b, c)
    r = p.compose(q).relative_to(p)
    assert math.isclose(r.x, q.x, abs_tol=1e-7)
    assert math.isclose(r.y, q.y, abs_tol=1e-7)
    assert abs(wrap_angle(r.theta - q.theta)) < 1e-9
    ident = p.compose(p.inverse())
    assert abs(ident.x) < 1e-9 and abs(ident.y) < 1e-9 and abs(ident.theta) < 1e-12


def test_compose_arrays_matches_pose():
    rng = np.random.default_rng(3)
    poses = rng.uniform(-5, 5, (50, 3))
    d = (0.3, -0.1, 0.4)
    out = compose_arrays(poses, d)
    for p, o in zip(poses, out):
        q = Pose2D(*p).compose(Pose2D(*d))
        assert np.allclose(o[:2], (q.x, q.y), atol=1e-12)
        assert abs(wrap_angle(o[2] - q.theta)) < 1e-12

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlpslam.geometry import Pose2D
from vlpslam.messages import LedObservation
from vlpslam.vlp import (MEASURED, VlpParams, VlpRejected, fix_quality, select_observation, solve_frame,
                         solve_height, solve_slo_vlp)
from vlpslam.world import CameraModel, LedBeacon, LedFeatureMap, observe_leds, project_led

CAM = CameraModel()
LED = LedBeacon(7, 2.0, 3.0, 2.7)


def _obs(pose, beacon=LED, cam=CAM, h=0.3):
    u, v, d = project_led(pose, h, beacon, cam)
    return LedObservation(beacon.id, u, v, d, 0.0)


def test_height_example():
    assert solve_height(102.08, 0.175, 1400) == pytest.approx(2.4, abs=1e-3)
    assert solve_height(1400 * 0.175 / 2.4, 0.175, 1400) == pytest.approx(2.4, abs=1e-12)


def test_height_unit_distance():
    assert solve_height(1400 * 0.175, 0.175, 1400) == 1.0


def test_height_rejects_small_disc():
    with pytest.raises(VlpRejected):
        solve_height(2.0, 0.175, 1400)


@given(st.floats(4.0, 1000.0), st.floats(1.0, 10.0))
def test_height_inverse_proportional(a, k):
    assert solve_height(a * k, 0.175, 1400) * k == pytest.approx(solve_height(a, 0.175, 1400), rel=1e-12)


@given(st.floats(-math.pi, math.pi))
def test_principal_point_fix_is_beacon(th):
    obs = LedObservation(LED.id, *CAM.principal_point, 102.08)
    f = solve_slo_vlp(obs, LED, th, CAM, 0.3)
    assert (f.x, f.y) == pytest.approx((LED.x, LED.y), abs=1e-12)
    assert f.heading_used == th


@pytest.mark.parametrize("heading", [0.0, math.pi / 2])
def test_roundtrip_example(heading):
    pose = Pose2D(1.5, 3.0, heading)
    f = solve_slo_vlp(_obs(pose), LED, heading, CAM, 0.3)
    assert math.hypot(f.x - 1.5, f.y - 3.0) < 1e-6
    assert f.z == pytest.approx(0.3, abs=1e-9)


def test_rotated_offset_example():
    # heading 90 deg: the LED 0.5 m ahead of the robot now sits on the camera's +x axis
    u, v, d = project_led(Pose2D(2.0, 2.5, math.pi / 2), 0.3, LED, CAM)
    assert u - CAM.principal_point[0] == pytest.approx(1400 * 0.5 / 2.4)
    f = solve_slo_vlp(LedObservation(LED.id, u, v, d), LED, math.pi / 2, CAM, 0.3)
    assert (f.x, f.y) == pytest.approx((2.0, 2.5), abs=1e-9)


def test_id_mismatch():
    with pytest.raises(ValueError):
        solve_slo_vlp(LedObservation(3, 1000, 700, 100), LED, 0.0, CAM, 0.3)


def test_non_finite_heading():
    with pytest.raises(ValueError):
        solve_slo_vlp(LedObservation(LED.id, 1000, 700, 100), LED, math.nan, CAM, 0.3)


def test_measured_height_mode():
    pose = Pose2D(1.8, 2.9, 0.4)
    f = solve_slo_vlp(_obs(pose), LED, 0.4, CAM, 0.3, VlpParams(height_mode=MEASURED))
    assert math.hypot(f.x - pose.x, f.y - pose.y) < 1e-9
    assert f.z == pytest.approx(0.3)


def test_select_rules():
    u0, v0 = CAM.principal_point
    assert select_observation([], CAM) is None
    a = LedObservation(2, u0 + 50, v0, 100)
    b = LedObservation(1, u0, v0 + 300, 100)
    assert select_observation([a], CAM) is a
    assert select_observation([b, a], CAM) is a
    c = LedObservation(1, u0 - 50, v0, 100)
    assert select_observation([a, c], CAM) is c


def test_solve_frame_skips_unknown_and_rejected():
    m = LedFeatureMap([LED])
    u0, v0 = CAM.principal_point
    unknown = LedObservation(99, u0, v0, 100)
    tiny = LedObservation(LED.id, u0 + 10, v0, 2.0)
    assert solve_frame([unknown, tiny], m, 0.0, CAM, 0.3) is None
    good = LedObservation(LED.id, u0 + 100, v0, 100)
    assert solve_frame([unknown, good], m, 0.0, CAM, 0.3) is not None


def test_roundtrip_random_coverage(lab):
    rng = np.random.default_rng(0)
    n = 0
    worst = 0.0
    while n < 1000:
        b = lab.led_map[int(rng.integers(1, 5))]
        p = Pose2D(b.x + rng.uniform(-1.3, 1.3), b.y + rng.uniform(-1.3, 1.3), rng.uniform(-math.pi, math.pi))
        obs = observe_leds(p, 0.3, lab.led_map, CameraModel(decode_success_prob=1.0, pixel_noise=0.0), None)
        if not obs:
            continue
        f = solve_frame(obs, lab.led_map, p.theta, CAM, 0.3)
        worst = max(worst, math.hypot(f.x - p.x, f.y - p.y))
        n += 1
    assert worst < 1e-6


@settings(deadline=None)
@given(st.floats(0.05, 1.0), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi),
       st.floats(1e-4, 0.02))
def test_heading_error_sensitivity(r, bearing, th, dh):
    pose = Pose2D(LED.x - r * math.cos(bearing), LED.y - r * math.sin(bearing), th)
    obs = _obs(pose)
    e1 = solve_slo_vlp(obs, LED, th + dh, CAM, 0.3)
    e2 = solve_slo_vlp(obs, LED, th + 2 * dh, CAM, 0.3)
    d1 = math.hypot(e1.x - pose.x, e1.y - pose.y)
    d2 = math.hypot(e2.x - pose.x, e2.y - pose.y)
    assert d1 == pytest.approx(2 * r * math.sin(dh / 2), rel=1e-6)
    assert d2 <= 2.2 * d1


@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(0, 2 * math.pi))
def test_quality_monotone(r1, r2, a):
    u0, v0 = CAM.principal_point
    near, far = sorted((r1, r2))
    q1 = fix_quality(u0 + near * math.cos(a), v0 + near * math.sin(a), CAM)
    q2 = fix_quality(u0 + far * math.cos(a), v0 + far * math.sin(a), CAM)
    assert q1 >= q2 and 0 < q2 <= 1

"""Single-LED positioning from one decoded beacon plus an external heading."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .messages import LedObservation, VlpFix
from .world import CameraModel, LedBeacon

MEASURED = "measured"
MAP_TRUSTED = "map"


class VlpRejected(ValueError):
    """The observation cannot produce a reliable fix."""


@dataclass(frozen=True)
class VlpParams:
    min_diameter_px: float = 4.0
    height_mode: str = MAP_TRUSTED

    def __post_init__(self):
        if self.height_mode not in (MEASURED, MAP_TRUSTED):
            raise ValueError(f"unknown height mode {self.height_mode!r}")


def solve_height(apparent_diameter_px, beacon_diameter, focal_px, min_diameter_px=4.0):
    """Camera-to-LED vertical distance from the apparent size of the disc."""
    if not (beacon_diameter > 0 and focal_px > 0):
        raise ValueError("beacon diameter and focal length must be positive")
    if not apparent_diameter_px >= min_diameter_px:
        raise VlpRejected(f"apparent diameter {apparent_diameter_px:.2f}px below {min_diameter_px}px")
    return focal_px * beacon_diameter / apparent_diameter_px


def fix_quality(u, v, cam: CameraModel):
    r = math.hypot(u - cam.principal_point[0], v - cam.principal_point[1])
    return 1.0 / (1.0 + r / cam.focal_px)


def solve_slo_vlp(obs: LedObservation, beacon: LedBeacon, heading, cam: CameraModel,
                  camera_height, params: VlpParams = VlpParams()) -> VlpFix:
    if obs.beacon_id != beacon.id:
        raise ValueError(f"observation of LED {obs.beacon_id} paired with beacon {beacon.id}")
    if not math.isfinite(heading):
        raise ValueError("heading must be finite")
    d_meas = solve_height(obs.diameter_px, beacon.diameter, cam.focal_px, params.min_diameter_px)
    d = beacon.z - camera_height if params.height_mode == MAP_TRUSTED else d_meas
    u0, v0 = cam.principal_point
    xc = (obs.u - u0) * d / cam.focal_px
    yc = (obs.v - v0) * d / cam.focal_px
    c, s = math.cos(heading), math.sin(heading)
    x = beacon.x - (c * xc - s * yc)
    y = beacon.y - (s * xc + c * yc)
    z = max(0.0, beacon.z - d_meas)
    return VlpFix(x, y, z, heading, beacon.id, obs.t, fix_quality(obs.u, obs.v, cam))


def select_observation(observations, cam: CameraModel | None = None):
    """Observation closest to the principal point; ties go to the lower beacon id."""
    if not observations:
        return None
    u0, v0 = cam.principal_point if cam is not None else CameraModel().principal_point
    return min(observations, key=lambda o: (math.hypot(o.u - u0, o.v - v0), o.beacon_id))


def solve_frame(observations, led_map, heading, cam, camera_height, params: VlpParams = VlpParams()):
    """Best fix available in one camera frame, or None (outage, unknown id or rejection)."""
    known = [o for o in observations if o.beacon_id in led_map]
    while known:
        obs = select_observation(known, cam)
        try:
            return solve_slo_vlp(obs, led_map[obs.beacon_id], heading, cam, camera_height, params)
        except VlpRejected:
            known.remove(obs)
    return None

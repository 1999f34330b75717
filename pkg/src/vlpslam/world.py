"""Deterministic 2D world: floorplan, LED beacons, robot kinematics and sensor models."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import kernels
from .geometry import Pose2D, wrap_angle, wrap_angles
from .grid import OccupancyGrid, load_map, save_map
from .messages import LedObservation, LidarScan, OdometryDelta

EPS_OMEGA = 1e-9
DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
LAB_WORLD_PATH = os.path.join(DATA_DIR, "lab_world.yaml")


class WorldError(ValueError):
    pass


class CollisionError(WorldError):
    pass


@dataclass(frozen=True)
class LedBeacon:
    id: int
    x: float
    y: float
    z: float
    diameter: float = 0.175

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"LED {self.id}: diameter must be positive")

    @property
    def position(self):
        return (self.x, self.y, self.z)


class LedFeatureMap(dict):
    """Beacon id -> :class:`LedBeacon`, with a fixed, predefined origin."""

    def __init__(self, beacons=()):
        super().__init__()
        for b in beacons:
            if b.id in self:
                raise ValueError(f"duplicate LED id {b.id}")
            self[b.id] = b

    def sorted(self):
        return [self[k] for k in sorted(self)]

    def to_records(self):
        return [{"id": b.id, "x": b.x, "y": b.y, "z": b.z, "diameter": b.diameter} for b in self.sorted()]

    @classmethod
    def from_records(cls, records):
        return cls(LedBeacon(int(r["id"]), float(r["x"]), float(r["y"]), float(r["z"]),
                             float(r.get("diameter", 0.175))) for r in records)


def load_led_map(path):
    """Load the LED section of a world file on its own."""
    with open(path) as f:
        doc = yaml.safe_load(f)
    return LedFeatureMap.from_records(doc["leds"])


@dataclass(frozen=True)
class LidarSpec:
    beam_count: int = 360
    angular_step: float = 2.0 * math.pi / 360
    max_range: float = 3.5
    range_noise_sigma: float = 0.05
    rate: float = 4.8  # 24 Hz odometry / 5: every scan lands on an odometry tick

    def __post_init__(self):
        if abs(self.beam_count * self.angular_step - 2.0 * math.pi) > 1e-9:
            raise ValueError("beam_count * angular_step must cover a full turn")


@dataclass(frozen=True)
class CameraModel:
    focal_px: float = 1400.0
    principal_point: tuple = (1024.0, 768.0)
    image_size: tuple = (2048, 1536)
    decode_success_prob: float = 0.9
    rate: float = 6.0
    pixel_noise: float = 1.0

    def __post_init__(self):
        u0, v0 = self.principal_point
        w, h = self.image_size
        if not (0 <= u0 < w and 0 <= v0 < h):
            raise ValueError("principal point must lie inside the image")
        if not 0.0 <= self.decode_success_prob <= 1.0:
            raise ValueError("decode_success_prob must be in [0, 1]")


@dataclass(frozen=True)
class OdometryNoise:
    """Rot-trans-rot noise, variance form: ``var(rot) = a1 rot^2 + a2 trans^2`` and
    ``var(trans) = a3 trans^2 + a4 (rot1^2 + rot2^2)``."""
    a1: float = 0.05
    a2: float = 0.05
    a3: float = 0.01
    a4: float = 0.01
    rate: float = 24.0

    def __post_init__(self):
        if min(self.a1, self.a2, self.a3, self.a4) < 0:
            raise ValueError("odometry noise parameters must be non-negative")

    @property
    def alphas(self):
        return (self.a1, self.a2, self.a3, self.a4)

    def is_zero(self):
        return not any(self.alphas)


@dataclass(frozen=True)
class VelocityLimits:
    v_max: float = 0.22
    omega_max: float = 2.84


@dataclass(frozen=True)
class RobotState:
    pose: Pose2D
    v: float = 0.0
    omega: float = 0.0
    camera_height: float = 0.3
    radius: float = 0.105
    collided: bool = False


@dataclass
class WorldModel:
    grid: OccupancyGrid
    led_map: LedFeatureMap
    bounds: tuple
    name: str = "world"
    points: dict = field(default_factory=dict)
    regions: dict = field(default_factory=dict)

    def __post_init__(self):
        (x0, y0), (x1, y1) = self.bounds
        for b in self.led_map.values():
            if not (x0 <= b.x <= x1 and y0 <= b.y <= y1):
                raise WorldError(f"LED {b.id} lies outside the world bounds")
        lo = self.grid.logodds
        if not np.all((lo == self.grid.l_min) | (lo == self.grid.l_max)):
            raise WorldError("ground-truth grid must be binary")
        self._occ = lo > 0

    @property
    def occupancy(self):
        return self._occ

    def check_camera_height(self, camera_height):
        for b in self.led_map.values():
            if not b.z > camera_height:
                raise WorldError(f"LED {b.id} is not above the camera")

    def is_free(self, x, y, radius=0.0):
        ix, iy = self.grid.world_to_cell(x, y)
        if not self.grid.in_bounds(ix, iy) or self._occ[iy, ix]:
            return False
        return radius <= 0 or not footprint_collides(self._occ, self.grid.origin_params(), x, y, radius)


# ---------------------------------------------------------------------------
# kinematics

def footprint_collides(occ, origin, x, y, radius):
    """True when a disc of ``radius`` at (x, y) overlaps any occupied cell square."""
    ox, oy, oth, res = origin
    c, s = math.cos(oth), math.sin(oth)
    dx, dy = x - ox, y - oy
    gx, gy = (c * dx + s * dy) / res, (-s * dx + c * dy) / res
    r = radius / res
    h, w = occ.shape
    ix0, ix1 = int(math.floor(gx - r)), int(math.floor(gx + r))
    iy0, iy1 = int(math.floor(gy - r)), int(math.floor(gy + r))
    if ix0 < 0 or iy0 < 0 or ix1 >= w or iy1 >= h:
        return True
    win = occ[iy0:iy1 + 1, ix0:ix1 + 1]
    if not win.any():
        return False
    iy, ix = np.nonzero(win)
    ix = ix + ix0
    iy = iy + iy0
    nx = np.clip(gx, ix, ix + 1)
    ny = np.clip(gy, iy, iy + 1)
    return bool(np.any((nx - gx) ** 2 + (ny - gy) ** 2 < r * r))


def _unicycle(pose: Pose2D, v, omega, dt):
    th = pose.theta
    if abs(omega) > EPS_OMEGA:
        x = pose.x + v / omega * (math.sin(th + omega * dt) - math.sin(th))
        y = pose.y - v / omega * (math.cos(th + omega * dt) - math.cos(th))
    else:
        x = pose.x + v * dt * math.cos(th)
        y = pose.y + v * dt * math.sin(th)
    return Pose2D(x, y, th + omega * dt)


def step_robot(state: RobotState, cmd, dt, occupancy=None, origin=None,
               limits: VelocityLimits | None = None) -> RobotState:
    """Advance the robot by exact unicycle integration over ``dt``.

    With an occupancy grid, the motion is checked in sub-steps of at most a
    quarter cell; on contact the robot stops at the last free sub-step and the
    returned state has ``collided`` set.
    """
    v, omega = float(cmd[0]), float(cmd[1])
    if not (math.isfinite(v) and math.isfinite(omega) and math.isfinite(dt)):
        raise ValueError("non-finite command or time step")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if limits is not None and (abs(v) > limits.v_max + 1e-12 or abs(omega) > limits.omega_max + 1e-12):
        raise ValueError(f"command ({v}, {omega}) outside velocity limits")
    end = _unicycle(state.pose, v, omega, dt)
    if occupancy is None or v == 0.0:
        return replace(state, pose=end, v=v, omega=omega, collided=False)
    res = origin[3]
    n = max(1, int(math.ceil(abs(v) * dt / (0.25 * res))))
    prev = state.pose
    for k in range(1, n + 1):
        p = end if k == n else _unicycle(state.pose, v, omega, dt * k / n)
        if footprint_collides(occupancy, origin, p.x, p.y, state.radius):
            return replace(state, pose=prev, v=0.0, omega=0.0, collided=True)
        prev = p
    return replace(state, pose=end, v=v, omega=omega, collided=False)


# ---------------------------------------------------------------------------
# odometry

def _rtr_decompose(dx, dy, dth):
    trans = np.hypot(dx, dy)
    rot1 = np.where(trans > 1e-12, np.arctan2(dy, dx), 0.0)
    rot2 = wrap_angles(dth - rot1)
    return rot1, trans, rot2


def _fold(rot):
    # a short backward step decomposes into rot1 ~ pi; its noise should scale like a small turn
    r = abs(rot)
    return min(r, math.pi - r)


def rtr_variances(rot1, trans, rot2, noise: OdometryNoise):
    """Variances of (rot1, trans, rot2) under the four-alpha model."""
    a1, a2, a3, a4 = noise.alphas
    r1, r2 = _fold(rot1), _fold(rot2)
    return (a1 * r1 ** 2 + a2 * trans ** 2,
            a3 * trans ** 2 + a4 * (r1 ** 2 + r2 ** 2),
            a1 * r2 ** 2 + a2 * trans ** 2)


def sample_deltas(delta, noise: OdometryNoise, rng, n):
    """Draw ``n`` noisy versions of a relative motion, shape (n, 3)."""
    d = np.asarray(delta, dtype=float)
    if noise.is_zero():
        return np.tile(d, (n, 1))
    rot1, trans, rot2 = (float(v) for v in _rtr_decompose(d[0], d[1], d[2]))
    sd_r1, sd_t, sd_r2 = (math.sqrt(v) for v in rtr_variances(rot1, trans, rot2, noise))
    z = rng.standard_normal((n, 3))
    r1 = rot1 + sd_r1 * z[:, 0]
    t = trans + sd_t * z[:, 1]
    r2 = rot2 + sd_r2 * z[:, 2]
    return np.stack([t * np.cos(r1), t * np.sin(r1), wrap_angles(r1 + r2)], axis=1)


def sample_odometry(true_delta: OdometryDelta, noise: OdometryNoise, rng) -> OdometryDelta:
    if not true_delta.is_finite():
        raise ValueError("non-finite odometry delta")
    if noise.is_zero():
        return true_delta
    dx, dy, dth = sample_deltas(true_delta.as_array(), noise, rng, 1)[0]
    return OdometryDelta(float(dx), float(dy), float(dth), true_delta.t, true_delta.t0)


# ---------------------------------------------------------------------------
# sensors

def simulate_lidar(pose: Pose2D, occupancy, origin, spec: LidarSpec, rng, t=0.0) -> LidarScan:
    """Ray-cast a full sweep from ``pose`` with Gaussian range noise.

    ``rng`` may be None for a noise-free scan. Raises :class:`CollisionError`
    when the pose sits inside an occupied cell.
    """
    ox, oy, oth, res = origin
    c, s = math.cos(oth), math.sin(oth)
    gx = int(math.floor((c * (pose.x - ox) + s * (pose.y - oy)) / res))
    gy = int(math.floor((-s * (pose.x - ox) + c * (pose.y - oy)) / res))
    h, w = occupancy.shape
    if not (0 <= gx < w and 0 <= gy < h) or occupancy[gy, gx]:
        raise CollisionError(f"lidar pose {pose} is not in free space")
    angles = pose.theta + spec.angular_step * np.arange(spec.beam_count)
    ranges, hit = kernels.raycast(occupancy, origin, pose.x, pose.y, angles, spec.max_range)
    if rng is not None:
        noise = rng.standard_normal(spec.beam_count) * spec.range_noise_sigma
        if spec.range_noise_sigma > 0:
            ranges = np.where(hit, np.clip(ranges + noise, 0.0, spec.max_range), spec.max_range)
    return LidarScan(t, ranges, hit, 0.0, spec.angular_step, spec.max_range)


def project_led(pose: Pose2D, camera_height, beacon: LedBeacon, cam: CameraModel):
    """Noise-free pinhole projection ``(u, v, diameter_px)`` of a beacon."""
    d = beacon.z - camera_height
    dx, dy = beacon.x - pose.x, beacon.y - pose.y
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    xc = c * dx + s * dy
    yc = -s * dx + c * dy
    u0, v0 = cam.principal_point
    return u0 + cam.focal_px * xc / d, v0 + cam.focal_px * yc / d, cam.focal_px * beacon.diameter / d


def _inside(cam, u, v):
    w, h = cam.image_size
    return 0.0 <= u < w and 0.0 <= v < h


def observe_leds(pose: Pose2D, camera_height, led_map: LedFeatureMap, cam: CameraModel, rng, t=0.0):
    """Decoded LED observations from the upward camera, sorted by beacon id.

    Random draws are consumed per beacon whether or not it is visible, so the
    stream stays aligned when the field of view or decode rate change.
    """
    out = []
    for b in led_map.sorted():
        u, v, dpx = project_led(pose, camera_height, b, cam)
        if rng is not None:
            decoded = rng.random() < cam.decode_success_prob
            nu, nv, nd = rng.standard_normal(3) * cam.pixel_noise
        else:
            decoded, nu, nv, nd = True, 0.0, 0.0, 0.0
        if not (decoded and _inside(cam, u, v)):
            continue
        u, v, dpx = u + nu, v + nv, dpx + nd
        if _inside(cam, u, v) and dpx > 0:
            out.append(LedObservation(b.id, float(u), float(v), float(dpx), t))
    return out


# ---------------------------------------------------------------------------
# world files

def rasterize_rects(bounds, resolution, rects):
    (x0, y0), (x1, y1) = bounds
    w = int(round((x1 - x0) / resolution))
    h = int(round((y1 - y0) / resolution))
    occ = np.zeros((h, w), dtype=bool)
    for rx0, ry0, rx1, ry1 in rects:
        i0 = max(0, int(round((rx0 - x0) / resolution)))
        i1 = min(w, int(round((rx1 - x0) / resolution)))
        j0 = max(0, int(round((ry0 - y0) / resolution)))
        j1 = min(h, int(round((ry1 - y0) / resolution)))
        occ[j0:j1, i0:i1] = True
    return occ


def save_world(world: WorldModel, path, map_name=None):
    path = os.fspath(path)
    base = os.path.dirname(path)
    map_name = map_name or os.path.splitext(os.path.basename(path))[0] + "_map.yaml"
    save_map(world.grid, os.path.join(base, map_name))
    (x0, y0), (x1, y1) = world.bounds
    doc = {
        "name": world.name,
        "map": map_name,
        "bounds": [[float(x0), float(y0)], [float(x1), float(y1)]],
        "leds": world.led_map.to_records(),
        "points": {k: [float(v) for v in p] for k, p in world.points.items()},
        "regions": {k: [float(v) for v in r] for k, r in world.regions.items()},
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=True)


def load_world(path=LAB_WORLD_PATH) -> WorldModel:
    path = os.fspath(path)
    with open(path) as f:
        doc = yaml.safe_load(f)
    for key in ("map", "bounds", "leds"):
        if key not in doc:
            raise WorldError(f"{path}: missing '{key}'")
    map_path = doc["map"]
    if not os.path.isabs(map_path):
        map_path = os.path.join(os.path.dirname(path), map_path)
    grid = load_map(map_path)
    (x0, y0), (x1, y1) = doc["bounds"]
    return WorldModel(grid, LedFeatureMap.from_records(doc["leds"]), ((x0, y0), (x1, y1)),
                      doc.get("name", "world"),
                      {k: tuple(v) for k, v in (doc.get("points") or {}).items()},
                      {k: tuple(v) for k, v in (doc.get("regions") or {}).items()})


def box_world(width=10.0, height=10.0, resolution=0.05, leds=(), thickness=0.05, rects=(), name="box"):
    """Walled rectangular room with its lower-left interior corner at (0, 0)."""
    t = thickness
    bounds = ((-t, -t), (width + t, height + t))
    walls = [(-t, -t, width + t, 0.0), (-t, height, width + t, height + t),
             (-t, -t, 0.0, height + t), (width, -t, width + t, height + t)]
    occ = rasterize_rects(bounds, resolution, walls + list(rects))
    grid = OccupancyGrid.from_occupancy(occ, resolution, Pose2D(-t, -t, 0.0))
    return WorldModel(grid, LedFeatureMap(leds), bounds, name)


# lab floorplan: 12.0 x 10.8 m, LED-map origin (point A) at (0, 0)
LAB_BOUNDS = ((-1.5, -1.0), (10.5, 9.8))
LAB_CORRIDOR_SHIFT = 6.0


def _lab_rects():
    (x0, y0), (x1, y1) = LAB_BOUNDS
    t = 0.05
    rects = [(x0, y0, x1, y0 + t), (x0, y1 - t, x1, y1), (x0, y0, x0 + t, y1), (x1 - t, y0, x1, y1)]
    # partition between the open lab and the corridor block, with two doorways
    doors = [(0.5, 1.7), (0.5 + LAB_CORRIDOR_SHIFT, 1.7 + LAB_CORRIDOR_SHIFT)]
    xs = [x0] + [v for d in doors for v in d] + [x1]
    for a, b in zip(xs[0::2], xs[1::2]):
        rects.append((a, 4.0, b, 4.05))
    # two identical corridors, one shifted copy of the other
    for shift in (0.0, LAB_CORRIDOR_SHIFT):
        rects.append((0.45 + shift, 4.05, 0.5 + shift, y1))
        rects.append((1.7 + shift, 4.05, 1.75 + shift, y1))
    # furniture in the open lab
    rects += [
        (1.8, 1.2, 2.2, 1.6),     # pillar
        (4.5, 1.0, 6.0, 1.8),     # bench
        (2.0, y0, 3.0, -0.6),     # cabinet on the south wall
        (6.0, y0, 6.8, -0.5),
        (9.4, 0.5, x1, 1.5),      # east shelf
        (3.0, 3.5, 4.5, 4.0),     # cabinet on the partition
        (8.6, 3.6, 10.0, 4.0),
        (-1.5, 1.8, -1.1, 2.6),   # west locker
    ]
    return rects


def build_lab_world(resolution=0.05) -> WorldModel:
    occ = rasterize_rects(LAB_BOUNDS, resolution, _lab_rects())
    grid = OccupancyGrid.from_occupancy(occ, resolution, Pose2D(LAB_BOUNDS[0][0], LAB_BOUNDS[0][1], 0.0))
    leds = LedFeatureMap([
        LedBeacon(1, 0.4, 0.3, 2.7),
        LedBeacon(2, 3.3, 2.2, 2.7),
        LedBeacon(3, 6.8, 0.6, 2.7),
        LedBeacon(4, 1.1, 3.2, 2.7),
    ])
    points = {"A": (0.0, 0.0), "B": (3.0, 2.0)}
    regions = {
        "corridor_1": (0.5, 4.05, 1.7, 9.75),
        "corridor_2": (0.5 + LAB_CORRIDOR_SHIFT, 4.05, 1.7 + LAB_CORRIDOR_SHIFT, 9.75),
        "lab": (-1.45, -0.95, 10.45, 4.0),
    }
    return WorldModel(grid, leds, LAB_BOUNDS, "lab", points, regions)

"""Scenario clock, scripted drivers and the newline-delimited sensor log."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2D, wrap_angle
from .messages import LedObservation, LidarScan, OdometryDelta
from .world import (CameraModel, LidarSpec, OdometryNoise, RobotState, VelocityLimits, WorldError,
                    WorldModel, footprint_collides, observe_leds, sample_odometry, simulate_lidar,
                    step_robot)

TICK_HZ = 120

ODOM, LIDAR, CAMERA, TRUTH = "odom", "lidar", "camera", "truth"
_SENSOR_ORDER = {TRUTH: 0, ODOM: 1, LIDAR: 2, CAMERA: 3}


@dataclass(frozen=True)
class SimConfig:
    lidar: LidarSpec = LidarSpec()
    camera: CameraModel = CameraModel()
    odometry: OdometryNoise = OdometryNoise()
    camera_height: float = 0.3
    robot_radius: float = 0.105
    limits: VelocityLimits = VelocityLimits()
    truth_rate: float = 24.0

    def periods(self):
        out = {}
        for name, rate in ((ODOM, self.odometry.rate), (LIDAR, self.lidar.rate),
                           (CAMERA, self.camera.rate), (TRUTH, self.truth_rate)):
            p = TICK_HZ / rate
            if rate <= 0 or abs(p - round(p)) > 1e-9:
                raise ValueError(f"{name} rate {rate} Hz must divide {TICK_HZ} Hz")
            out[name] = int(round(p))
        return out

    def noise_free(self):
        from dataclasses import replace
        return replace(self, lidar=replace(self.lidar, range_noise_sigma=0.0),
                       camera=replace(self.camera, pixel_noise=0.0, decode_success_prob=1.0),
                       odometry=OdometryNoise(0.0, 0.0, 0.0, 0.0, self.odometry.rate))


@dataclass
class DynamicObstacle:
    """Axis-aligned box moving at constant velocity while it exists.

    The box halts for a tick whenever its next position would touch the robot,
    so it never drives into a stationary robot.
    """
    center: tuple
    size: tuple = (0.3, 0.3)
    velocity: tuple = (0.0, 0.0)
    t_start: float = 0.0
    t_end: float = math.inf

    def __post_init__(self):
        self.position = tuple(float(c) for c in self.center)

    def rect(self, pos=None):
        cx, cy = pos or self.position
        hw, hh = self.size[0] / 2, self.size[1] / 2
        return cx - hw, cy - hh, cx + hw, cy + hh

    def active(self, t):
        return self.t_start <= t < self.t_end


@dataclass
class Scenario:
    id: str
    start: Pose2D
    waypoints: list = field(default_factory=list)
    speed: float = 0.2
    turn_rate: float = 0.5
    duration: float | None = None
    settle: float = 0.0
    led_outages: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        start = d["start"]
        obstacles = [DynamicObstacle(tuple(o["center"]), tuple(o.get("size", (0.3, 0.3))),
                                     tuple(o.get("velocity", (0.0, 0.0))), float(o.get("t_start", 0.0)),
                                     float(o.get("t_end", math.inf))) for o in d.get("obstacles", [])]
        return cls(str(d["id"]), Pose2D(*start), [tuple(w) for w in d.get("waypoints", [])],
                   float(d.get("speed", 0.2)), float(d.get("turn_rate", 0.5)),
                   d.get("duration"), float(d.get("settle", 0.0)),
                   [tuple(o) for o in d.get("led_outages", [])], obstacles)

    def path_length(self):
        pts = [(self.start.x, self.start.y)] + list(self.waypoints)
        return sum(math.dist(a, b) for a, b in zip(pts, pts[1:]))

    def total_turn(self):
        """Absolute heading change the rotate-then-drive driver performs."""
        th = self.start.theta
        total = 0.0
        pts = [(self.start.x, self.start.y)] + list(self.waypoints)
        for a, b in zip(pts, pts[1:]):
            if math.dist(a, b) == 0:
                continue
            h = math.atan2(b[1] - a[1], b[0] - a[0])
            total += abs(wrap_angle(h - th))
            th = h
        return total


@dataclass(frozen=True)
class Event:
    tick: int
    t: float
    sensor: str
    payload: object
    scenario: str = ""


class WaypointDriver:
    """Rotate in place toward the next waypoint, then drive straight onto it."""

    def __init__(self, waypoints, speed, turn_rate, dt):
        self.waypoints = list(waypoints)
        self.speed = speed
        self.turn_rate = turn_rate
        self.dt = dt
        self.index = 0

    @property
    def done(self):
        return self.index >= len(self.waypoints)

    def command(self, pose: Pose2D):
        while self.index < len(self.waypoints):
            tx, ty = self.waypoints[self.index]
            dist = math.hypot(tx - pose.x, ty - pose.y)
            if dist < 1e-9:
                self.index += 1
                continue
            err = wrap_angle(math.atan2(ty - pose.y, tx - pose.x) - pose.theta)
            if abs(err) > 1e-12 and dist > 1e-6:
                w = max(-self.turn_rate, min(self.turn_rate, err / self.dt))
                return 0.0, w
            return min(self.speed, dist / self.dt), 0.0
        return 0.0, 0.0


class Simulator:
    """Tick-driven simulation at ``TICK_HZ``; sensors fire on integer tick periods."""

    def __init__(self, world: WorldModel, config: SimConfig, seed, start: Pose2D,
                 scenario_id="", obstacles=(), led_outages=()):
        self.world = world
        self.config = config
        self.scenario_id = scenario_id
        self.periods = config.periods()
        world.check_camera_height(config.camera_height)
        ss = np.random.SeedSequence(seed)
        self.rng_odom, self.rng_lidar, self.rng_camera = (np.random.default_rng(s) for s in ss.spawn(3))
        self.state = RobotState(start, camera_height=config.camera_height, radius=config.robot_radius)
        self.tick = 0
        self.origin = world.grid.origin_params()
        self.static_occ = world.occupancy
        self.obstacles = list(obstacles)
        self.led_outages = list(led_outages)
        self.collisions = 0
        self._odom_pose = start
        self._odom_tick = 0

    @property
    def t(self):
        return self.tick / TICK_HZ

    @property
    def dt(self):
        return 1.0 / TICK_HZ

    def occupancy(self, t=None):
        t = self.t if t is None else t
        live = [o for o in self.obstacles if o.active(t)]
        if not live:
            return self.static_occ
        from .world import rasterize_rects
        occ = self.static_occ.copy()
        bounds = self.world.bounds
        occ |= rasterize_rects(bounds, self.origin[3], [o.rect() for o in live])
        return occ

    def led_available(self, t):
        return not any(a <= t < b for a, b in self.led_outages)

    def sense(self):
        """Events for the current tick, in fixed sensor order."""
        k, t = self.tick, self.t
        pose = self.state.pose
        out = []
        if k % self.periods[TRUTH] == 0:
            out.append(Event(k, t, TRUTH, pose, self.scenario_id))
        if k % self.periods[ODOM] == 0 and k > 0:
            true = pose.relative_to(self._odom_pose)
            delta = OdometryDelta(true.x, true.y, true.theta, t, self._odom_tick / TICK_HZ)
            out.append(Event(k, t, ODOM, sample_odometry(delta, self.config.odometry, self.rng_odom),
                             self.scenario_id))
            self._odom_pose = pose
            self._odom_tick = k
        if k % self.periods[LIDAR] == 0:
            scan = simulate_lidar(pose, self.occupancy(), self.origin, self.config.lidar, self.rng_lidar, t)
            out.append(Event(k, t, LIDAR, scan, self.scenario_id))
        if k % self.periods[CAMERA] == 0:
            obs = observe_leds(pose, self.config.camera_height, self.world.led_map, self.config.camera,
                               self.rng_camera, t)
            if not self.led_available(t):
                obs = []
            out.append(Event(k, t, CAMERA, tuple(obs), self.scenario_id))
        return out

    def _move_obstacles(self):
        t_next = (self.tick + 1) / TICK_HZ
        robot = self.state.pose
        r = self.state.radius + 0.05
        for o in self.obstacles:
            if not o.active(self.t):
                continue
            nx = o.position[0] + o.velocity[0] / TICK_HZ
            ny = o.position[1] + o.velocity[1] / TICK_HZ
            x0, y0, x1, y1 = o.rect((nx, ny))
            cx = min(max(robot.x, x0), x1)
            cy = min(max(robot.y, y0), y1)
            if (cx - robot.x) ** 2 + (cy - robot.y) ** 2 >= r * r:
                o.position = (nx, ny)
        return t_next

    def step(self, cmd):
        occ = self.occupancy()
        self.state = step_robot(self.state, cmd, self.dt, occ, self.origin, self.config.limits)
        if self.state.collided:
            self.collisions += 1
        self._move_obstacles()
        self.tick += 1

    def footprint_on_occupied(self):
        p = self.state.pose
        return footprint_collides(self.occupancy(), self.origin, p.x, p.y, self.state.radius)


@dataclass(frozen=True)
class SensorLog:
    scenario_id: str
    seed: int
    events: tuple

    def of(self, sensor):
        return [e for e in self.events if e.sensor == sensor]

    @property
    def duration(self):
        return self.events[-1].t if self.events else 0.0

    def to_ndjson(self):
        return "".join(_event_line(e, self.seed) + "\n" for e in self.events)

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_ndjson())

    @classmethod
    def read(cls, path):
        with open(path) as f:
            return cls.from_ndjson(f.read())

    @classmethod
    def from_ndjson(cls, text):
        events = []
        sid, seed = "", 0
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            sid, seed = rec["scenario"], rec["seed"]
            events.append(Event(rec["tick"], rec["t"], rec["sensor"], _decode(rec["sensor"], rec["data"], rec["t"]), sid))
        return cls(sid, seed, tuple(events))


def _encode(sensor, p):
    if sensor == TRUTH:
        return [p.x, p.y, p.theta]
    if sensor == ODOM:
        return [p.dx, p.dy, p.dtheta, p.t0]
    if sensor == LIDAR:
        return {"angle_min": p.angle_min, "angle_step": p.angle_step, "max_range": p.max_range,
                "ranges": [float(r) for r in p.ranges], "hit": [int(h) for h in p.hit]}
    if sensor == CAMERA:
        return [[o.beacon_id, o.u, o.v, o.diameter_px] for o in p]
    raise ValueError(sensor)


def _decode(sensor, d, t):
    if sensor == TRUTH:
        return Pose2D(*d)
    if sensor == ODOM:
        return OdometryDelta(d[0], d[1], d[2], t, d[3])
    if sensor == LIDAR:
        return LidarScan(t, np.array(d["ranges"], dtype=float), np.array(d["hit"], dtype=bool),
                         d["angle_min"], d["angle_step"], d["max_range"])
    if sensor == CAMERA:
        return tuple(LedObservation(int(i), u, v, dp, t) for i, u, v, dp in d)
    raise ValueError(f"unknown sensor tag {sensor!r}")


def _event_line(e, seed):
    rec = {"scenario": e.scenario, "seed": seed, "tick": e.tick, "t": e.t,
           "stamp": "%013.6f" % e.t, "sensor": e.sensor, "data": _encode(e.sensor, e.payload)}
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def validate_scenario(world: WorldModel, scenario: Scenario, config: SimConfig):
    """Reject scripts whose poses or straight legs leave free space."""
    r = config.robot_radius
    pts = [(scenario.start.x, scenario.start.y)] + list(scenario.waypoints)
    for x, y in pts:
        if not world.is_free(x, y, r):
            raise WorldError(f"scenario {scenario.id}: pose ({x}, {y}) is outside free space")
    for a, b in zip(pts, pts[1:]):
        n = max(2, int(math.dist(a, b) / (0.5 * world.grid.resolution)))
        for k in range(n + 1):
            x = a[0] + (b[0] - a[0]) * k / n
            y = a[1] + (b[1] - a[1]) * k / n
            if not world.is_free(x, y, r):
                raise WorldError(f"scenario {scenario.id}: leg {a} -> {b} crosses an obstacle")
    if scenario.turn_rate > config.limits.omega_max or scenario.speed > config.limits.v_max:
        raise WorldError(f"scenario {scenario.id}: speed exceeds the velocity limits")


def run_scenario(world: WorldModel, scenario: Scenario, seed, config: SimConfig = SimConfig()) -> SensorLog:
    """Drive the scripted waypoints and record every sensor event.

    Identical (scenario, seed, config) produce identical logs.
    """
    validate_scenario(world, scenario, config)
    sim = Simulator(world, config, seed, scenario.start, scenario.id, scenario.obstacles, scenario.led_outages)
    driver = WaypointDriver(scenario.waypoints, scenario.speed, scenario.turn_rate, sim.dt)
    stop_tick = None if scenario.duration is None else int(round(scenario.duration * TICK_HZ))
    events = []
    while True:
        events.extend(sim.sense())
        cmd = driver.command(sim.state.pose)
        if stop_tick is not None:
            if sim.tick >= stop_tick:
                break
        elif driver.done:
            if stop_tick is None:
                stop_tick = sim.tick + int(round(scenario.settle * TICK_HZ))
            if sim.tick >= stop_tick:
                break
        sim.step(cmd)
    return SensorLog(scenario.id, int(seed), tuple(events))


def stationary(pose: Pose2D, duration, scenario_id="static"):
    return Scenario(scenario_id, pose, duration=duration)


def loop_scenario(repeats=2, speed=0.2, turn_rate=0.5, led_outages=((60.0, 75.0),), scenario_id="loop46"):
    """Rectangular 8.5 x 3 m loop in the open lab, driven twice: 46 m in total."""
    corners = [(8.5, 0.0), (8.5, 3.0), (0.0, 3.0), (0.0, 0.0)]
    return Scenario(scenario_id, Pose2D(0.0, 0.0, 0.0), corners * repeats, speed, turn_rate,
                    led_outages=[tuple(o) for o in led_outages])

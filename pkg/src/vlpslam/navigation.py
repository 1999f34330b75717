"""Costmaps, A* global planning, dynamic-window local planning and the closed control loop."""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Pose2D, wrap_angle
from .grid import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .messages import LidarScan

LETHAL = 255
INSCRIBED = 253
MAX_DECAY = 252

STRAIGHT = 1000
DIAGONAL = 1414


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class VelocityCommand:
    v: float = 0.0
    omega: float = 0.0


@dataclass
class Costmap:
    costs: np.ndarray        # uint8, [iy, ix]
    resolution: float
    origin: Pose2D
    inflation_radius: float
    clearance: np.ndarray    # metres to the nearest lethal cell

    @property
    def shape(self):
        return self.costs.shape

    def origin_params(self):
        return (self.origin.x, self.origin.y, self.origin.theta, self.resolution)

    def world_to_cell(self, x, y):
        c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
        dx, dy = x - self.origin.x, y - self.origin.y
        return (int(math.floor((c * dx + s * dy) / self.resolution)),
                int(math.floor((-s * dx + c * dy) / self.resolution)))

    def cell_center(self, ix, iy):
        c, s = math.cos(self.origin.theta), math.sin(self.origin.theta)
        gx, gy = (ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution
        return self.origin.x + c * gx - s * gy, self.origin.y + s * gx + c * gy

    def in_bounds(self, ix, iy):
        h, w = self.costs.shape
        return 0 <= ix < w and 0 <= iy < h

    def cost_at(self, x, y):
        ix, iy = self.world_to_cell(x, y)
        return int(self.costs[iy, ix]) if self.in_bounds(ix, iy) else LETHAL

    def blocked(self):
        """Cells where the robot centre may not be: lethal or within the inscribed radius."""
        return self.costs >= INSCRIBED


def inflation_costs(dist, robot_radius, inflation_radius, cost_decay, resolution):
    """Cost from distance to the nearest lethal cell centre (metres)."""
    inscribed = robot_radius + math.sqrt(2.0) * resolution
    cost = np.zeros(dist.shape, dtype=np.uint8)
    decay = np.round(MAX_DECAY * np.exp(-cost_decay * (dist - inscribed))).astype(np.int64)
    band = (dist > inscribed) & (dist <= inflation_radius)
    cost[band] = np.clip(decay[band], 1, MAX_DECAY)
    cost[dist <= inscribed] = INSCRIBED
    cost[dist == 0] = LETHAL
    return cost


def build_costmap(trinary, resolution, origin: Pose2D, inflation_radius=0.45, cost_decay=6.0,
                  robot_radius=0.105) -> Costmap:
    """Lethal on occupied and unknown cells, exponentially decaying cost out to ``inflation_radius``.

    ``robot_radius + sqrt(2) * resolution`` is the inscribed radius: a robot centre
    anywhere in such a cell could overlap a lethal cell.
    """
    trinary = np.asarray(trinary)
    lethal = (trinary == OCCUPIED) | (trinary == UNKNOWN)
    if lethal.any():
        dist = np.sqrt(kernels.edt_squared(lethal)) * resolution
    else:
        dist = np.full(trinary.shape, np.inf)
    costs = inflation_costs(dist, robot_radius, inflation_radius, cost_decay, resolution)
    return Costmap(costs, resolution, origin, inflation_radius, dist)


# ---------------------------------------------------------------------------
# global planner

def edge_cost(base, cell_cost, weight=3):
    """Integer edge cost so A* and a float Dijkstra agree exactly."""
    return base * (MAX_DECAY + weight * int(cell_cost))


def _octile(ax, ay, bx, by):
    dx, dy = abs(ax - bx), abs(ay - by)
    return MAX_DECAY * (STRAIGHT * max(dx, dy) + (DIAGONAL - STRAIGHT) * min(dx, dy))


_NEIGHBOURS = [(1, 0, STRAIGHT), (-1, 0, STRAIGHT), (0, 1, STRAIGHT), (0, -1, STRAIGHT),
               (1, 1, DIAGONAL), (1, -1, DIAGONAL), (-1, 1, DIAGONAL), (-1, -1, DIAGONAL)]


def astar_cells(costs, start, goal, weight=3, allow_start_blocked=True):
    """8-connected A* over a cost array; returns (cell list, integer cost).

    Moving into a cell costs ``edge_cost(step, cost of that cell)``; cells at
    or above INSCRIBED are impassable.
    """
    h, w = costs.shape
    sx, sy = start
    gx, gy = goal
    if not (0 <= gx < w and 0 <= gy < h) or costs[gy, gx] >= INSCRIBED:
        raise PlanningError("invalid goal")
    if not (0 <= sx < w and 0 <= sy < h) or costs[sy, sx] == LETHAL or (
            costs[sy, sx] >= INSCRIBED and not allow_start_blocked):
        raise PlanningError("invalid start")
    cost_list = costs.tolist()
    g = {start: 0}
    parent = {start: None}
    heap = [(_octile(sx, sy, gx, gy), 0, sx, sy)]
    closed = set()
    while heap:
        f, gc, x, y = heapq.heappop(heap)
        if (x, y) in closed:
            continue
        if (x, y) == (gx, gy):
            cells = []
            node = (x, y)
            while node is not None:
                cells.append(node)
                node = parent[node]
            return cells[::-1], gc
        closed.add((x, y))
        for dx, dy, base in _NEIGHBOURS:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h):
                continue
            c = cost_list[ny][nx]
            if c >= INSCRIBED:
                continue
            ng = gc + base * (MAX_DECAY + weight * c)
            if ng < g.get((nx, ny), 1 << 62):
                g[(nx, ny)] = ng
                parent[(nx, ny)] = (x, y)
                heapq.heappush(heap, (ng + _octile(nx, ny, gx, gy), ng, nx, ny))
    raise PlanningError("unreachable")


@dataclass
class Path:
    poses: list
    cost: int = 0

    def __len__(self):
        return len(self.poses)

    def xy(self):
        return np.array([(p.x, p.y) for p in self.poses])

    def length(self):
        a = self.xy()
        return float(np.hypot(*np.diff(a, axis=0).T).sum()) if len(a) > 1 else 0.0


def plan_global(costmap: Costmap, start: Pose2D, goal: Pose2D, weight=3) -> Path:
    s = costmap.world_to_cell(start.x, start.y)
    gcell = costmap.world_to_cell(goal.x, goal.y)
    if not costmap.in_bounds(*gcell):
        raise PlanningError("invalid goal")
    if not costmap.in_bounds(*s):
        raise PlanningError("invalid start")
    cells, cost = astar_cells(costmap.costs, s, gcell, weight)
    poses = []
    for k, (ix, iy) in enumerate(cells):
        x, y = costmap.cell_center(ix, iy)
        if k + 1 < len(cells):
            nx, ny = costmap.cell_center(*cells[k + 1])
            th = math.atan2(ny - y, nx - x)
        else:
            th = goal.theta
        poses.append(Pose2D(x, y, th))
    poses[-1] = goal
    return Path(poses, cost)


# ---------------------------------------------------------------------------
# local costmap

class LocalCostmap:
    """Rolling obstacle window fed by lidar; endpoints mark, rays and the robot footprint clear.

    With ``persistent=False`` (default) each update rebuilds the window from the
    latest scan only. Persistent marks survive while occluded, which leaves a
    trail behind anything moving across the view.
    """

    def __init__(self, size=4.0, resolution=0.05, inflation_radius=0.45, cost_decay=6.0, robot_radius=0.105,
                 persistent=False):
        self.persistent = persistent
        self.n = int(round(size / resolution))
        self.resolution = resolution
        self.inflation_radius = inflation_radius
        self.cost_decay = cost_decay
        self.robot_radius = robot_radius
        self.obstacles = np.zeros((self.n, self.n), dtype=bool)
        self.corner = None      # world cell index of [0, 0]
        self.costmap: Costmap | None = None

    def _recentre(self, x, y):
        res = self.resolution
        cx = int(math.floor(x / res)) - self.n // 2
        cy = int(math.floor(y / res)) - self.n // 2
        if self.corner is None:
            self.corner = (cx, cy)
            return
        ox, oy = self.corner
        dx, dy = cx - ox, cy - oy
        if dx == 0 and dy == 0:
            return
        new = np.zeros_like(self.obstacles)
        n = self.n
        xs0, xs1 = max(0, dx), min(n, n + dx)
        ys0, ys1 = max(0, dy), min(n, n + dy)
        if xs0 < xs1 and ys0 < ys1:
            new[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx] = self.obstacles[ys0:ys1, xs0:xs1]
        self.obstacles = new
        self.corner = (cx, cy)

    def update(self, scan: LidarScan, pose: Pose2D) -> Costmap:
        self._recentre(pose.x, pose.y)
        res = self.resolution
        origin = Pose2D(self.corner[0] * res, self.corner[1] * res, 0.0)
        ranges = np.where(scan.hit, scan.ranges + 1e-3, scan.ranges)
        labels = kernels.mark_rays(self.obstacles.shape, (origin.x, origin.y, 0.0, res), pose.x, pose.y,
                                   scan.angles() + pose.theta, ranges, scan.hit)
        if not self.persistent:
            self.obstacles[:] = False
        self.obstacles[labels == 1] = False
        self.obstacles[labels == 2] = True
        # the robot cannot see into its own body: clear the footprint
        n = self.n
        cx = (np.arange(n) + 0.5) * res + origin.x
        cy = (np.arange(n) + 0.5) * res + origin.y
        inside = (cx[None, :] - pose.x) ** 2 + (cy[:, None] - pose.y) ** 2 <= self.robot_radius ** 2
        self.obstacles[inside] = False
        tri = np.where(self.obstacles, OCCUPIED, FREE)
        self.costmap = build_costmap(tri, res, origin, self.inflation_radius, self.cost_decay, self.robot_radius)
        return self.costmap


def update_local_costmap(local: LocalCostmap, scan: LidarScan, pose: Pose2D) -> Costmap:
    return local.update(scan, pose)


# ---------------------------------------------------------------------------
# dynamic window approach

@dataclass(frozen=True)
class DwaParams:
    v_max: float = 0.22
    omega_max: float = 2.84
    acc_v: float = 2.5
    acc_omega: float = 3.2
    v_samples: int = 11
    omega_samples: int = 21
    horizon: float = 1.5
    sim_dt: float = 0.05
    control_dt: float = 0.1
    w_path: float = 0.75
    w_goal: float = 0.25
    w_clearance: float = 1.0
    w_velocity: float = 0.3
    clearance_cap: float = 0.5
    lookahead: float = 0.8
    rotate_threshold: float = math.radians(60.0)
    rotate_speed: float = 0.8
    approach_gain: float = 1.0
    v_min_approach: float = 0.02
    xy_tolerance: float = 0.05
    yaw_tolerance: float = math.radians(10.0)


@dataclass
class LocalDecision:
    cmd: VelocityCommand
    fallback: bool = False
    collision_free: bool = True
    mode: str = "dwa"


def _nearest_index(path_xy, x, y):
    d = np.hypot(path_xy[:, 0] - x, path_xy[:, 1] - y)
    return int(np.argmin(d))


def _carrot(path_xy, start_idx, lookahead):
    acc = 0.0
    for k in range(start_idx + 1, len(path_xy)):
        acc += math.dist(path_xy[k - 1], path_xy[k])
        if acc >= lookahead:
            return k
    return len(path_xy) - 1


def _rollout_blocked(costmap: Costmap, pose: Pose2D):
    blocked = costmap.blocked()
    ix, iy = costmap.world_to_cell(pose.x, pose.y)
    # the robot already occupies its own cell: unless that cell is lethal,
    # staying in it (turning on the spot) is not a collision
    if costmap.in_bounds(ix, iy) and costmap.costs[iy, ix] != LETHAL and blocked[iy, ix]:
        blocked = blocked.copy()
        blocked[iy, ix] = False
    return blocked


def _simulate(costmap, pose, vs, ws, params: DwaParams):
    steps = int(round(params.horizon / params.sim_dt))
    blocked = _rollout_blocked(costmap, pose)
    return kernels.rollout(blocked, costmap.clearance, costmap.origin_params(), pose.as_array(),
                           vs, ws, params.sim_dt, steps)


def rotation_command(costmap, pose, direction, params: DwaParams, speed=None):
    w = math.copysign(params.rotate_speed if speed is None else speed, direction)
    _, collide, _ = _simulate(costmap, pose, np.array([0.0]), np.array([w]), params)
    return LocalDecision(VelocityCommand(0.0, w), True, not bool(collide[0]), "rotate")


def plan_local(pose: Pose2D, vel: VelocityCommand, path: Path, costmap: Costmap,
               params: DwaParams = DwaParams()) -> LocalDecision:
    if len(path) == 0:
        raise PlanningError("empty path")
    p = params
    xy = path.xy()
    goal = path.poses[-1]
    dgoal = math.hypot(goal.x - pose.x, goal.y - pose.y)
    if dgoal <= p.xy_tolerance:
        err = wrap_angle(goal.theta - pose.theta)
        if abs(err) <= p.yaw_tolerance:
            return LocalDecision(VelocityCommand(0.0, 0.0), False, True, "arrived")
        speed = min(p.rotate_speed, max(0.1, abs(err) / p.control_dt * 0.5))
        d = rotation_command(costmap, pose, err, p, speed)
        d.mode, d.fallback = "align", False
        return d
    i0 = _nearest_index(xy, pose.x, pose.y)
    k = _carrot(xy, i0, p.lookahead)
    cx, cy = xy[k]
    herr = wrap_angle(math.atan2(cy - pose.y, cx - pose.x) - pose.theta)
    if abs(herr) > p.rotate_threshold and dgoal > 2 * p.xy_tolerance:
        d = rotation_command(costmap, pose, herr, p)
        d.mode, d.fallback = "turn", False
        return d

    v_hi = min(p.v_max, vel.v + p.acc_v * p.control_dt, max(p.v_min_approach, p.approach_gain * dgoal))
    v_lo = max(0.0, vel.v - p.acc_v * p.control_dt)
    v_lo = min(v_lo, v_hi)
    w_lo = max(-p.omega_max, vel.omega - p.acc_omega * p.control_dt)
    w_hi = min(p.omega_max, vel.omega + p.acc_omega * p.control_dt)
    vs1 = np.linspace(v_lo, v_hi, p.v_samples)
    ws1 = np.linspace(w_lo, w_hi, p.omega_samples)
    V, W = np.meshgrid(vs1, ws1, indexing="ij")
    vs, ws = V.ravel(), W.ravel()
    moving = vs > 1e-9
    end, collide, mclear = _simulate(costmap, pose, vs, ws, p)
    ok = moving & ~collide
    ix, iy = costmap.world_to_cell(pose.x, pose.y)
    if costmap.in_bounds(ix, iy) and costmap.blocked()[iy, ix]:
        # already touching something: only moves that end farther away count,
        # creeping inside the own cell would push into it
        c0 = costmap.clearance[iy, ix]
        for i in np.flatnonzero(ok):
            jx, jy = costmap.world_to_cell(end[i, 0], end[i, 1])
            c1 = costmap.clearance[jy, jx] if costmap.in_bounds(jx, jy) else 0.0
            ok[i] = c1 > c0 and mclear[i] >= c0
    if not ok.any():
        return rotation_command(costmap, pose, herr if herr != 0 else 1.0, p)

    seg = xy[i0:max(k + 1, i0 + 2)]
    dx = end[:, 0][:, None] - seg[None, :, 0]
    dy = end[:, 1][:, None] - seg[None, :, 1]
    path_d = np.sqrt(np.min(dx * dx + dy * dy, axis=1))
    goal_d = np.hypot(end[:, 0] - cx, end[:, 1] - cy)
    clear = np.minimum(mclear, p.clearance_cap) / p.clearance_cap

    def norm(a):
        m = float(np.max(a[ok]))
        return a / m if m > 0 else np.zeros_like(a)

    score = (-p.w_path * norm(path_d) - p.w_goal * norm(goal_d)
             + p.w_clearance * clear + p.w_velocity * vs / p.v_max)
    score = np.where(ok, score, -np.inf)
    best = float(np.max(score))
    # ties: smaller |omega|, then positive omega, for a deterministic and mirror-consistent pick
    cand = np.flatnonzero(score >= best - 1e-12)
    j = min(cand, key=lambda i: (abs(ws[i]), -ws[i], -vs[i]))
    return LocalDecision(VelocityCommand(float(vs[j]), float(ws[j])), False, True, "dwa")


# ---------------------------------------------------------------------------
# closed loop

@dataclass(frozen=True)
class NavParams:
    dwa: DwaParams = DwaParams()
    inflation_radius: float = 0.45
    cost_decay: float = 6.0
    robot_radius: float = 0.105
    cost_weight: int = 3
    local_size: float = 4.0
    control_hz: float = 10.0
    replan_after: int = 10
    timeout: float = 180.0


class Navigator:
    """Global A* on a static costmap, DWA on a rolling lidar costmap."""

    def __init__(self, static_grid: OccupancyGrid, params: NavParams = NavParams()):
        self.params = params
        self.static_trinary = np.where(static_grid.occupied_mask(), OCCUPIED, FREE)
        self.resolution = static_grid.resolution
        self.origin = static_grid.origin
        self.global_costmap = build_costmap(self.static_trinary, self.resolution, self.origin,
                                            params.inflation_radius, params.cost_decay, params.robot_radius)
        self.local = LocalCostmap(params.local_size, self.resolution, params.inflation_radius,
                                  params.cost_decay, params.robot_radius)
        self.path: Path | None = None
        self.goal: Pose2D | None = None
        self.fallback_ticks = 0
        self.replans = 0
        self.decisions = []

    def set_goal(self, pose: Pose2D, goal: Pose2D) -> Path:
        self.goal = goal
        self.path = plan_global(self.global_costmap, pose, goal, self.params.cost_weight)
        return self.path

    def on_scan(self, scan: LidarScan, pose: Pose2D):
        self.local.update(scan, pose)

    def replan(self, pose: Pose2D) -> Path:
        """Re-plan with the obstacles currently in the local window added to the static map."""
        tri = self.static_trinary.copy()
        if self.local.corner is not None:
            iy, ix = np.nonzero(self.local.obstacles)
            res = self.resolution
            wx = (ix + self.local.corner[0] + 0.5) * res
            wy = (iy + self.local.corner[1] + 0.5) * res
            for x, y in zip(wx, wy):
                gx, gy = self.global_costmap.world_to_cell(x, y)
                if self.global_costmap.in_bounds(gx, gy):
                    tri[gy, gx] = OCCUPIED
        p = self.params
        cm = build_costmap(tri, self.resolution, self.origin, p.inflation_radius, p.cost_decay, p.robot_radius)
        self.replans += 1
        self.path = plan_global(cm, pose, self.goal, p.cost_weight)
        return self.path

    def control(self, pose: Pose2D, vel: VelocityCommand) -> LocalDecision:
        if self.path is None:
            raise PlanningError("no goal set")
        cm = self.local.costmap
        if cm is None:
            return LocalDecision(VelocityCommand(), True, True, "wait")
        d = plan_local(pose, vel, self.path, cm, self.params.dwa)
        self.fallback_ticks = self.fallback_ticks + 1 if d.fallback else 0
        if self.fallback_ticks > self.params.replan_after:
            self.fallback_ticks = 0
            try:
                self.replan(pose)
            except PlanningError:
                pass
        self.decisions.append(d)
        return d


@dataclass
class NavResult:
    success: bool
    reason: str
    time: float
    final_estimate: Pose2D | None
    final_truth: Pose2D
    executed_length: float
    planned_length: float
    planned_cost: int
    collisions: int
    footprint_events: int
    unsafe_commands: int
    replans: int
    fallback_commands: int
    min_clearance: float = math.inf
    trajectory: list = field(default_factory=list)   # (t, true x, y, theta, est x, y, theta, v, omega, remaining)

    @property
    def final_error(self):
        e = self.final_estimate
        if e is None:
            return math.inf
        return math.hypot(e.x - self.final_truth.x, e.y - self.final_truth.y)


def navigate(world, sim_config, stack_config, start: Pose2D, goal: Pose2D, seed, obstacles=(),
             params: NavParams = NavParams(), lfield=None, initial_heading=None, scenario_id="nav") -> NavResult:
    """Drive the simulated robot from ``start`` to ``goal`` using only the fused estimate.

    The stack seeds itself from the first VLP fix (solved with
    ``initial_heading``, default the true start heading); the robot stays put
    until then.
    """
    from .mcl import build_likelihood_field
    from .scenario import CAMERA, LIDAR, TICK_HZ, Simulator
    from .stack import LocalizationStack

    if lfield is None:
        lfield = build_likelihood_field(world.grid, stack_config.mcl.sigma, stack_config.mcl.max_dist)
    sim = Simulator(world, sim_config, seed, start, scenario_id, obstacles)
    stack = LocalizationStack(world.led_map, lfield, stack_config, seed)
    stack.set_initial_heading(start.theta if initial_heading is None else initial_heading)
    nav = Navigator(world.grid, params)
    period = int(round(TICK_HZ / params.control_hz))
    cmd = VelocityCommand()
    limits = sim_config.limits
    traj = []
    footprint = 0
    unsafe = 0
    planned = None
    est = None
    reason = "timeout"
    success = False
    max_ticks = int(params.timeout * TICK_HZ)
    true_clear = np.sqrt(kernels.edt_squared(world.occupancy)) * world.grid.resolution
    min_clear = math.inf
    while sim.tick < max_ticks:
        for ev in sim.sense():
            stack.process(ev)
            if ev.sensor == LIDAR and stack.initialized:
                nav.on_scan(ev.payload, stack.ekf.latest().mean)
        if sim.tick % period == 0:
            if stack.initialized:
                est = stack.ekf.latest().mean
                if planned is None:
                    try:
                        planned = nav.set_goal(est, goal)
                    except PlanningError as err:
                        reason = str(err)
                        break
                d = nav.control(est, cmd)
                if not d.collision_free:
                    unsafe += 1
                if d.mode == "arrived":
                    success, reason = True, "arrived"
                    break
                cmd = VelocityCommand(float(np.clip(d.cmd.v, -limits.v_max, limits.v_max)),
                                      float(np.clip(d.cmd.omega, -limits.omega_max, limits.omega_max)))
                p = sim.state.pose
                traj.append((sim.t, p.x, p.y, p.theta, est.x, est.y, est.theta, cmd.v, cmd.omega,
                             remaining_length(nav.path, est)))
            else:
                cmd = VelocityCommand()
        sim.step((cmd.v, cmd.omega))
        if sim.footprint_on_occupied():
            footprint += 1
        p = sim.state.pose
        ix, iy = world.grid.world_to_cell(p.x, p.y)
        if world.grid.in_bounds(ix, iy):
            min_clear = min(min_clear, float(true_clear[iy, ix]) - sim.state.radius)
    p = sim.state.pose
    e = est.as_array() if est is not None else (np.nan,) * 3
    traj.append((sim.t, p.x, p.y, p.theta, *e, 0.0, 0.0,
                 remaining_length(nav.path, est) if nav.path is not None and est is not None else math.nan))
    xy = np.array([(r[1], r[2]) for r in traj])
    executed = float(np.hypot(*np.diff(xy, axis=0).T).sum()) if len(xy) > 1 else 0.0
    return NavResult(success, reason, sim.t, est, p, executed,
                     planned.length() if planned is not None else math.nan,
                     planned.cost if planned is not None else 0,
                     sim.collisions, footprint, unsafe, nav.replans,
                     sum(1 for d in nav.decisions if d.fallback), min_clear, traj)


def remaining_length(path: Path, pose: Pose2D):
    """Distance to go along ``path`` from its point nearest ``pose``."""
    xy = path.xy()
    i = _nearest_index(xy, pose.x, pose.y)
    rest = xy[i:]
    along = float(np.hypot(*np.diff(rest, axis=0).T).sum()) if len(rest) > 1 else 0.0
    return along + math.hypot(xy[i, 0] - pose.x, xy[i, 1] - pose.y)

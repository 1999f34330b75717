"""Scan-matching log-odds mapper whose frame can be anchored to the LED map by a VLP fix."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .geometry import Pose2D
from .grid import DEFAULT_OCC_THRESHOLD, OccupancyGrid, save_map
from .messages import LidarScan, VlpFix
from .scenario import CAMERA, LIDAR, ODOM, TRUTH
from .vlp import VlpParams, solve_frame
from .world import CameraModel, LedFeatureMap


class AnchorError(RuntimeError):
    """The map frame was already anchored."""


@dataclass(frozen=True)
class MapAnchor:
    transform: Pose2D = Pose2D(0.0, 0.0, 0.0)
    anchored: bool = False
    t: float | None = None

    def to_led(self, pose: Pose2D) -> Pose2D:
        return self.transform.compose(pose)


def anchor_origin(anchor: MapAnchor, fix: VlpFix, mapper_pose: Pose2D, fused_heading,
                  min_quality=0.8) -> MapAnchor:
    """Single-shot anchoring: ``mapper_pose`` is mapped onto (fix.x, fix.y, fused_heading)."""
    if anchor.anchored:
        raise AnchorError("map anchor is immutable once set")
    if not fix.quality > min_quality:
        raise ValueError(f"fix quality {fix.quality:.3f} not above {min_quality}")
    target = Pose2D(fix.x, fix.y, fused_heading)
    return MapAnchor(target.compose(mapper_pose.inverse()), True, fix.t)


@dataclass(frozen=True)
class MatchParams:
    sigma: float = 0.10
    max_dist: float = 0.3
    step_xy: float | None = None        # defaults to one cell
    step_theta: float = math.radians(0.5)
    halvings: int = 4
    min_cells: int = 30
    stride: int = 1
    max_iter: int = 50
    # a return marks the cell the surface lies in; half a cell along the beam
    # moves the endpoint to where that cell's centre sits on average
    endpoint_extend: float = 0.025
    interpolate: bool = True
    # endpoints falling on never-observed cells at the prior are left out; otherwise
    # the matcher drags the scan back onto the edge of what is already mapped
    known_only: bool = True
    # position directions whose score curvature is below this fraction of the
    # strongest one are left at the prior (a lone wall does not fix along-wall motion)
    degeneracy_ratio: float = 0.05


def _match_field(occ, res, max_range, prior_cell, sigma, max_dist):
    """Likelihood field over a window around the prior; exact within the scan footprint."""
    h, w = occ.shape
    m = int(math.ceil((max_range + max_dist) / res)) + 2
    cx, cy = prior_cell
    x0, x1 = max(0, cx - m), min(w, cx + m + 1)
    y0, y1 = max(0, cy - m), min(h, cy + m + 1)
    if x0 >= x1 or y0 >= y1:
        return None, (0, 0)
    sub = occ[y0:y1, x0:x1]
    if not sub.any():
        return None, (x0, y0)
    d = np.sqrt(kernels.edt_squared(sub)) * res
    d = np.minimum(d, max_dist)
    return np.exp(-d * d / (2.0 * sigma * sigma)), (x0, y0)


def scan_match(grid: OccupancyGrid, scan: LidarScan, prior: Pose2D, params: MatchParams = MatchParams()):
    """Hill-climb the pose that maximises the summed field value of the scan endpoints.

    Falls back to ``(prior, 0.0)`` when fewer than ``params.min_cells`` occupied
    cells lie within sensor range of the prior.
    """
    res = grid.resolution
    occ = grid.occupied_mask(DEFAULT_OCC_THRESHOLD)
    ix, iy = (int(v) for v in grid.world_to_cell(prior.x, prior.y))
    rc = int(math.ceil(scan.max_range / res))
    h, w = occ.shape
    win = occ[max(0, iy - rc):max(0, iy + rc + 1), max(0, ix - rc):max(0, ix + rc + 1)]
    if int(win.sum()) < params.min_cells:
        return prior, 0.0
    pts = scan.endpoints(params.stride, extend=params.endpoint_extend)
    if params.known_only and len(pts):
        c0, s0 = math.cos(prior.theta), math.sin(prior.theta)
        gx, gy = grid.world_to_grid(prior.x + c0 * pts[:, 0] - s0 * pts[:, 1],
                                    prior.y + s0 * pts[:, 0] + c0 * pts[:, 1])
        gx, gy = np.floor(gx).astype(int), np.floor(gy).astype(int)
        inside = (gx >= 0) & (gx < w) & (gy >= 0) & (gy < h)
        known = np.zeros(len(pts), bool)
        known[inside] = grid.logodds[gy[inside], gx[inside]] != 0
        pts = pts[known]
    if len(pts) == 0:
        return prior, 0.0
    table, (x0, y0) = _match_field(occ, res, scan.max_range, (ix, iy), params.sigma, params.max_dist)
    if table is None:
        return prior, 0.0
    ox, oy, oth, _ = grid.origin_params()
    c, s = math.cos(oth), math.sin(oth)
    sub_origin = (ox + (c * x0 - s * y0) * res, oy + (s * x0 + c * y0) * res, oth, res)
    outside = math.exp(-params.max_dist ** 2 / (2 * params.sigma ** 2))

    def score(poses):
        return kernels.score_poses(table, outside, sub_origin, poses, pts, params.interpolate)

    p0 = prior.as_array()
    best = p0.copy()
    best_score = float(score(best[None, :])[0])
    sxy = res if params.step_xy is None else params.step_xy
    sth = params.step_theta
    for _ in range(params.halvings + 1):
        for _ in range(params.max_iter):
            steps = np.array([[sxy, 0, 0], [-sxy, 0, 0], [0, sxy, 0], [0, -sxy, 0], [0, 0, sth], [0, 0, -sth]])
            cand = best + steps
            sc = score(cand)
            k = int(np.argmax(sc))
            if sc[k] > best_score:
                best, best_score = cand[k], float(sc[k])
            else:
                break
        sxy *= 0.5
        sth *= 0.5
    if params.degeneracy_ratio > 0:
        best = _constrain_to_observable(best, p0, score, res, params.degeneracy_ratio)
        best_score = float(score(best[None, :])[0])
    return Pose2D.from_array(best), best_score


def _constrain_to_observable(best, prior, score, h, ratio):
    """Keep only the part of the position correction the scan actually constrains."""
    g = np.array([[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    cand = np.tile(best, (len(g), 1))
    cand[:, :2] += h * g
    f = score(cand)
    fxx = (f[1] - 2 * f[0] + f[2]) / h ** 2
    fyy = (f[3] - 2 * f[0] + f[4]) / h ** 2
    fxy = (f[5] - f[6] - f[7] + f[8]) / (4 * h ** 2)
    ev, vec = np.linalg.eigh(-np.array([[fxx, fxy], [fxy, fyy]]))
    if ev[-1] <= 0:
        return np.array([prior[0], prior[1], best[2]])
    keep = vec[:, ev > ratio * ev[-1]]
    out = best.copy()
    out[:2] = prior[:2] + keep @ (keep.T @ (best[:2] - prior[:2]))
    return out


@dataclass(frozen=True)
class MapperParams:
    resolution: float = 0.05
    size: float = 26.0
    l_free: float = -0.4
    l_occ: float = 0.85
    match: MatchParams = MatchParams()
    use_vlp: bool = True
    anchor_quality: float = 0.8
    initial_heading: float = 0.0
    camera: CameraModel = CameraModel()
    camera_height: float = 0.3
    vlp: VlpParams = VlpParams()
    endpoint_extend: float = 1e-3


def noise_free_mapper(params: MapperParams = MapperParams()) -> MapperParams:
    """Zero range noise puts returns on cell boundaries, so no endpoint shift is wanted."""
    return replace(params, match=replace(params.match, endpoint_extend=0.0))


def insert_scan(grid: OccupancyGrid, pose: Pose2D, scan: LidarScan, l_free=-0.4, l_occ=0.85,
                extend=1e-3) -> OccupancyGrid:
    """Log-odds update of one scan; returns a new grid."""
    ranges = np.where(scan.hit, scan.ranges + extend, scan.ranges)
    labels = kernels.mark_rays(grid.shape, grid.origin_params(), pose.x, pose.y,
                               scan.angles() + pose.theta, ranges, scan.hit)
    out = grid.copy()
    out.logodds[labels == 1] += l_free
    out.logodds[labels == 2] += l_occ
    out.clamp()
    return out


class GridMapper:
    """Incremental mapper; poses and cells live in the mapper-start frame.

    Anchoring only changes the exported origin, never the cells.
    """

    def __init__(self, params: MapperParams = MapperParams(), led_map: LedFeatureMap | None = None):
        self.params = params
        self.led_map = led_map
        n = int(round(params.size / params.resolution))
        half = n * params.resolution / 2.0
        self.grid = OccupancyGrid.empty(n, n, params.resolution, Pose2D(-half, -half, 0.0))
        self.pose = Pose2D(0.0, 0.0, 0.0)
        self.pending = Pose2D(0.0, 0.0, 0.0)
        self.anchor = MapAnchor()
        self.scans = 0
        self.trajectory = []     # (t, x, y, theta) in the mapper frame
        self.matched = 0

    def current_pose(self):
        return self.pose.compose(self.pending)

    def add_odometry(self, delta):
        self.pending = self.pending.compose(delta.as_pose())

    def add_scan(self, scan: LidarScan):
        p = self.params
        prior = self.current_pose()
        self.pending = Pose2D(0.0, 0.0, 0.0)
        pose = prior
        if self.scans > 0:
            pose, score = scan_match(self.grid, scan, prior, p.match)
            self.matched += score > 0
        self.grid = insert_scan(self.grid, pose, scan, p.l_free, p.l_occ, p.endpoint_extend)
        self.pose = pose
        self.scans += 1
        self.trajectory.append((scan.t, pose.x, pose.y, pose.theta))
        return pose

    def add_camera(self, observations):
        p = self.params
        if not p.use_vlp or self.anchor.anchored or not observations or self.led_map is None:
            return None
        mp = self.current_pose()
        heading = p.initial_heading + mp.theta
        fix = solve_frame(observations, self.led_map, heading, p.camera, p.camera_height, p.vlp)
        if fix is None or not fix.quality > p.anchor_quality:
            return None
        self.anchor = anchor_origin(self.anchor, fix, mp, heading, p.anchor_quality)
        return fix

    def export(self) -> OccupancyGrid:
        """Map expressed in the anchored frame (mapper frame if never anchored)."""
        return self.grid.with_origin(self.anchor.to_led(self.grid.origin))

    def led_frame_trajectory(self):
        out = []
        for t, x, y, th in self.trajectory:
            q = self.anchor.to_led(Pose2D(x, y, th))
            out.append((t, q.x, q.y, q.theta))
        return out


@dataclass
class MapResult:
    grid: OccupancyGrid
    anchor: MapAnchor
    trajectory: list
    truth: list = field(default_factory=list)
    scans: int = 0
    matched: int = 0

    def save(self, yaml_path):
        a = self.anchor.transform
        save_map(self.grid, yaml_path, extra={"anchored": bool(self.anchor.anchored),
                                              "anchor": [a.x, a.y, a.theta]})


def build_map(events, params: MapperParams = MapperParams(), led_map=None) -> MapResult:
    events = list(events)
    if not any(e.sensor == LIDAR for e in events):
        raise ValueError("sensor log holds no lidar scans")
    m = GridMapper(params, led_map)
    truth = []
    for e in events:
        if e.sensor == ODOM:
            m.add_odometry(e.payload)
        elif e.sensor == LIDAR:
            m.add_scan(e.payload)
        elif e.sensor == CAMERA:
            m.add_camera(e.payload)
        elif e.sensor == TRUTH:
            truth.append((e.t, e.payload.x, e.payload.y, e.payload.theta))
    return MapResult(m.export(), m.anchor, m.led_frame_trajectory(), truth, m.scans, m.matched)


def frame_origin_offset(result: MapResult):
    """Where the exported map's coordinate origin sits in the LED frame.

    For every scan, truth (+) inverse(estimate) is the LED-frame pose of the map
    frame; the mean over the run is returned as (x, y, theta).
    """
    truth = np.array(result.truth)
    pts = []
    for t, x, y, th in result.trajectory:
        tp = interpolate_pose(truth, t)
        o = tp.compose(Pose2D(x, y, th).inverse())
        pts.append((o.x, o.y, o.theta))
    a = np.array(pts)
    return float(a[:, 0].mean()), float(a[:, 1].mean()), math.atan2(np.sin(a[:, 2]).mean(), np.cos(a[:, 2]).mean())


def interpolate_pose(series, t) -> Pose2D:
    """Linear interpolation in a (t, x, y, theta) array, heading along the short arc."""
    ts = series[:, 0]
    k = int(np.searchsorted(ts, t))
    if k <= 0:
        return Pose2D(*series[0, 1:4])
    if k >= len(ts):
        return Pose2D(*series[-1, 1:4])
    a, b = series[k - 1], series[k]
    if b[0] == t:
        return Pose2D(*b[1:4])
    f = (t - a[0]) / (b[0] - a[0])
    dth = math.remainder(b[3] - a[3], 2 * math.pi)
    return Pose2D(a[1] + f * (b[1] - a[1]), a[2] + f * (b[2] - a[2]), a[3] + f * dth)


def occupancy_iou(built: OccupancyGrid, truth_occ, truth_origin, resolution, threshold=DEFAULT_OCC_THRESHOLD,
                  known_only=True):
    """Cell IoU of occupied sets after resampling the built map onto the ground-truth lattice."""
    h, w = truth_occ.shape
    ox, oy, oth, res = truth_origin
    iy, ix = np.mgrid[0:h, 0:w]
    c, s = math.cos(oth), math.sin(oth)
    px = ox + (c * (ix + 0.5) - s * (iy + 0.5)) * res
    py = oy + (s * (ix + 0.5) + c * (iy + 0.5)) * res
    gx, gy = built.world_to_grid(px, py)
    bx, by = np.floor(gx).astype(int), np.floor(gy).astype(int)
    inside = (bx >= 0) & (bx < built.width) & (by >= 0) & (by < built.height)
    l = np.zeros((h, w))
    l[inside] = built.logodds[by[inside], bx[inside]]
    prob = 1.0 / (1.0 + np.exp(-l))
    occ_b = prob > threshold
    mask = (l != 0) if known_only else np.ones_like(occ_b)
    a = occ_b & mask
    b = truth_occ & mask
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0

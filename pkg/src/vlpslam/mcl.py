"""Monte Carlo localisation against a known occupancy grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .geometry import Pose2D, compose_arrays, wrap_angles
from .grid import OccupancyGrid
from .messages import LidarScan, MclEstimate, OdometryDelta
from .world import OdometryNoise, sample_deltas


@dataclass(frozen=True)
class MclParams:
    n_particles: int = 500
    sigma: float = 0.10
    max_dist: float = 0.5
    z_rand: float = 0.05
    beam_stride: int = 4
    resample_threshold: float = 0.5
    noise: OdometryNoise = OdometryNoise()
    # extra per-update roughening so a stationary filter keeps refining
    jitter_xy: float = 0.003
    jitter_theta: float = 0.002
    heading_var_floor: float = 1e-6
    endpoint_extend: float = 1e-3


@dataclass
class LikelihoodField:
    values: np.ndarray
    origin: tuple
    sigma: float
    max_dist: float

    def __post_init__(self):
        self._tables = {}

    @property
    def cap_value(self):
        return math.exp(-self.max_dist ** 2 / (2 * self.sigma ** 2))

    def log_table(self, z_rand):
        """Per-cell log of the mixture ``(1 - z_rand) * field + z_rand`` and its off-map value."""
        if z_rand not in self._tables:
            with np.errstate(divide="ignore"):
                table = np.log((1.0 - z_rand) * self.values + z_rand)
                outside = math.log((1.0 - z_rand) * self.cap_value + z_rand) if (
                    z_rand > 0 or self.cap_value > 0) else -np.inf
            self._tables[z_rand] = (table, outside)
        return self._tables[z_rand]

    def lookup(self, x, y):
        ox, oy, oth, res = self.origin
        c, s = math.cos(oth), math.sin(oth)
        dx, dy = np.asarray(x) - ox, np.asarray(y) - oy
        ix = np.floor((c * dx + s * dy) / res).astype(np.int64)
        iy = np.floor((-s * dx + c * dy) / res).astype(np.int64)
        h, w = self.values.shape
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.full(ix.shape, self.cap_value)
        out[inside] = self.values[iy[inside], ix[inside]]
        return out


def build_likelihood_field(grid: OccupancyGrid, sigma=0.10, max_dist=0.5, occupied=None) -> LikelihoodField:
    """Gaussian of the exact distance to the nearest occupied cell, capped at ``max_dist``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    occ = grid.logodds > 0 if occupied is None else np.asarray(occupied, dtype=bool)
    if not occ.any():
        raise ValueError("likelihood field needs at least one occupied cell")
    d = np.sqrt(kernels.edt_squared(occ)) * grid.resolution
    d = np.minimum(d, max_dist)
    values = np.exp(-d * d / (2.0 * sigma * sigma))
    values[occ] = 1.0
    return LikelihoodField(values, grid.origin_params(), sigma, max_dist)


@dataclass
class ParticleSet:
    poses: np.ndarray
    weights: np.ndarray
    degenerate: bool = False

    @property
    def count(self):
        return len(self.weights)

    def copy(self):
        return ParticleSet(self.poses.copy(), self.weights.copy(), self.degenerate)

    def ess(self):
        return 1.0 / float(np.sum(self.weights ** 2))


def _check_psd(cov):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("covariance must be a symmetric 3x3 matrix")
    ev, vec = np.linalg.eigh(cov)
    if ev.min() < -1e-12:
        raise ValueError("covariance is not positive semidefinite")
    return vec * np.sqrt(np.clip(ev, 0.0, None))


def initialize(pose: Pose2D, covariance, n, rng) -> ParticleSet:
    root = _check_psd(covariance)
    z = rng.standard_normal((n, 3))
    poses = pose.as_array() + z @ root.T
    poses[:, 2] = wrap_angles(poses[:, 2])
    return ParticleSet(poses, np.full(n, 1.0 / n))


def initialize_uniform(boxes, n, rng, is_free, heading=None) -> ParticleSet:
    """Uniform samples over the free part of axis-aligned boxes ``(x0, y0, x1, y1)``."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    out = []
    while len(out) < n:
        k = rng.choice(len(boxes), p=area / area.sum())
        x0, y0, x1, y1 = boxes[k]
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        th = rng.uniform(-math.pi, math.pi) if heading is None else heading
        if is_free(x, y):
            out.append((x, y, th))
    poses = np.array(out)
    poses[:, 2] = wrap_angles(poses[:, 2])
    return ParticleSet(poses, np.full(n, 1.0 / n))


def predict(pset: ParticleSet, delta, noise: OdometryNoise, rng, jitter=(0.0, 0.0)) -> ParticleSet:
    d = delta.as_array() if isinstance(delta, OdometryDelta) else np.asarray(delta, dtype=float)
    deltas = sample_deltas(d, noise, rng, pset.count)
    poses = compose_arrays(pset.poses, deltas)
    jxy, jth = jitter
    if jxy > 0 or jth > 0:
        z = rng.standard_normal((pset.count, 3))
        poses[:, 0] += jxy * z[:, 0]
        poses[:, 1] += jxy * z[:, 1]
        poses[:, 2] = wrap_angles(poses[:, 2] + jth * z[:, 2])
    return ParticleSet(poses, pset.weights.copy(), pset.degenerate)


def weight(pset: ParticleSet, scan: LidarScan, lfield: LikelihoodField, params: MclParams = MclParams()) -> ParticleSet:
    """Likelihood-field measurement update, renormalised.

    No-return beams carry no evidence. If every weight underflows the set is
    reset to uniform and flagged ``degenerate``.
    """
    pts = scan.endpoints(params.beam_stride, extend=params.endpoint_extend)
    prior = pset.weights
    if len(pts) == 0:
        w = prior / prior.sum()
        return ParticleSet(pset.poses, w, False)
    table, outside = lfield.log_table(params.z_rand)
    loglik = kernels.score_poses(table, outside, lfield.origin, pset.poses, pts)
    w = prior * np.exp(loglik)
    total = w.sum()
    if not (total > 0 and np.isfinite(total)):
        return ParticleSet(pset.poses, np.full(pset.count, 1.0 / pset.count), True)
    return ParticleSet(pset.poses, w / total, False)


def systematic_indices(weights, u0, n_out):
    """Indices picked by low-variance resampling with the single draw ``u0`` in [0, 1/n_out)."""
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    positions = u0 + np.arange(n_out) / n_out
    idx = np.searchsorted(cdf, positions, side="right")
    return np.minimum(idx, len(weights) - 1)


def resample(pset: ParticleSet, rng, threshold=0.5) -> ParticleSet:
    n = pset.count
    if pset.ess() >= threshold * n:
        return pset
    idx = systematic_indices(pset.weights, rng.uniform(0.0, 1.0 / n), n)
    return ParticleSet(pset.poses[idx].copy(), np.full(n, 1.0 / n), pset.degenerate)


def estimate(pset: ParticleSet, t=0.0, heading_var_floor=1e-6) -> MclEstimate:
    w = pset.weights
    p = pset.poses
    mx = float(np.dot(w, p[:, 0]))
    my = float(np.dot(w, p[:, 1]))
    mth = math.atan2(float(np.dot(w, np.sin(p[:, 2]))), float(np.dot(w, np.cos(p[:, 2]))))
    r = np.stack([p[:, 0] - mx, p[:, 1] - my, wrap_angles(p[:, 2] - mth)], axis=1)
    cov = (r * w[:, None]).T @ r
    cov = 0.5 * (cov + cov.T)
    cov[2, 2] = max(cov[2, 2], heading_var_floor)
    ess = min(float(len(w)), max(1.0, 1.0 / float(np.sum(w ** 2))))
    return MclEstimate(Pose2D(mx, my, mth), cov, ess, t)


class MonteCarloLocalizer:
    """Stateful filter: odometry is accumulated between scans, then predict-weight-resample."""

    def __init__(self, lfield: LikelihoodField, params: MclParams = MclParams(), rng=None, debug_sink=None):
        self.field = lfield
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.particles = None
        self.pending = Pose2D(0.0, 0.0, 0.0)
        self.last = None
        self.degenerate_count = 0
        self.updates = 0
        self.debug_sink = debug_sink

    @property
    def initialized(self):
        return self.particles is not None

    def initialize(self, pose: Pose2D, covariance, t=0.0):
        self.particles = initialize(pose, covariance, self.params.n_particles, self.rng)
        self.pending = Pose2D(0.0, 0.0, 0.0)
        self.last = estimate(self.particles, t, self.params.heading_var_floor)
        return self.last

    def set_particles(self, pset: ParticleSet, t=0.0):
        self.particles = pset
        self.pending = Pose2D(0.0, 0.0, 0.0)
        self.last = estimate(pset, t, self.params.heading_var_floor)

    def add_odometry(self, delta: OdometryDelta):
        self.pending = self.pending.compose(delta.as_pose())

    def update(self, scan: LidarScan) -> MclEstimate | None:
        if self.particles is None:
            return None
        p = self.params
        pset = predict(self.particles, self.pending.as_array(), p.noise, self.rng, (p.jitter_xy, p.jitter_theta))
        self.pending = Pose2D(0.0, 0.0, 0.0)
        pset = weight(pset, scan, self.field, p)
        if pset.degenerate:
            self.degenerate_count += 1
        est = estimate(pset, scan.t, p.heading_var_floor)
        self.particles = resample(pset, self.rng, p.resample_threshold)
        self.last = est
        self.updates += 1
        if self.debug_sink is not None:
            self.debug_sink.write(dump_particles(self.particles, scan.t))
        return est


def dump_particles(pset: ParticleSet, t):
    rows = [[float(a), float(b), float(c), float(w)] for (a, b, c), w in zip(pset.poses, pset.weights)]
    return json.dumps({"t": t, "particles": rows}, separators=(",", ":")) + "\n"

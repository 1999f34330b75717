"""The full localisation stack: SLO-VLP fixes, MCL and odometry fused by the EKF.

The stack consumes a :class:`~vlpslam.scenario.SensorLog` one event at a
time (replay mode) and records, next to the fused output, the two baseline
estimators that come for free from the same events: SLO-VLP fixes solved with
the dead-reckoned heading, and the raw MCL estimates.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ekf import EkfParams, FusionFilter, chi2_threshold, floor_covariance, mahalanobis2
from .geometry import Pose2D
from .mcl import LikelihoodField, MclParams, MonteCarloLocalizer
from .messages import FusedEstimate, VlpFix
from .scenario import CAMERA, LIDAR, ODOM, TRUTH
from .vlp import VlpParams, solve_frame
from .world import CameraModel, LedFeatureMap


@dataclass(frozen=True)
class StackConfig:
    mcl: MclParams = MclParams()
    ekf: EkfParams = EkfParams()
    vlp: VlpParams = VlpParams()
    camera: CameraModel = CameraModel()
    camera_height: float = 0.3
    use_vlp: bool = True
    use_mcl: bool = True
    # spread of the particle cloud and the EKF prior when seeded from a fix
    init_sigma_xy: float = 0.05
    init_sigma_theta: float = math.radians(3.0)
    reinit: bool = True
    reinit_count: int = 3
    reinit_prob: float = 0.99
    divergence_floor: float = 0.03


@dataclass
class StackResult:
    fused: list = field(default_factory=list)        # (t, x, y, theta)
    vlp_fixes: list = field(default_factory=list)    # fixes solved with the fused heading
    vlp_only: list = field(default_factory=list)     # fixes solved with the dead-reckoned heading
    mcl: list = field(default_factory=list)          # (t, x, y, theta, ess)
    odom: list = field(default_factory=list)         # dead reckoning (t, x, y, theta)
    truth: list = field(default_factory=list)
    timing: list = field(default_factory=list)       # (t, sensor, seconds)
    reinit_events: list = field(default_factory=list)
    init_time: float | None = None
    first_fix_time: float | None = None
    counters: dict = field(default_factory=dict)
    final: FusedEstimate | None = None


class LocalizationStack:
    def __init__(self, led_map: LedFeatureMap, lfield: LikelihoodField | None,
                 config: StackConfig = StackConfig(), seed=0, on_step=None):
        self.led_map = led_map
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x51]))
        self.ekf = FusionFilter(config.ekf, on_step=on_step)
        self.mcl = MonteCarloLocalizer(lfield, config.mcl, rng) if (config.use_mcl and lfield is not None) else None
        self.dead: Pose2D | None = None
        self.initial_heading = None
        self.result = StackResult()
        self._diverged = 0
        self._reinits = 0

    @property
    def initialized(self):
        return self.ekf.initialized

    def initialize(self, pose: Pose2D, covariance, t, mcl_covariance=None):
        """Explicit initial pose for every estimator (EKF, MCL and dead reckoning)."""
        self.ekf.initialize(pose, covariance, t)
        if self.mcl is not None:
            self.mcl.initialize(pose, covariance if mcl_covariance is None else mcl_covariance, t)
        self.dead = pose
        self.result.init_time = t

    def set_initial_heading(self, heading):
        """Heading prior used to solve the first fix when the stack seeds itself from VLP."""
        self.initial_heading = heading

    def _seed_from_fix(self, fix: VlpFix):
        c = self.config
        q = max(fix.quality, 1e-6)
        var_xy = (c.ekf.vlp_sigma / q) ** 2
        P = np.diag([var_xy, var_xy, c.init_sigma_theta ** 2])
        pose = Pose2D(fix.x, fix.y, fix.heading_used)
        self.ekf.initialize(pose, P, fix.t)
        if self.mcl is not None:
            self.mcl.initialize(pose, np.diag([c.init_sigma_xy ** 2, c.init_sigma_xy ** 2,
                                               c.init_sigma_theta ** 2]), fix.t)
        self.dead = pose
        self.result.init_time = fix.t

    # -- event handlers -----------------------------------------------------

    def process(self, event):
        t0 = time.perf_counter()
        s = event.sensor
        if s == TRUTH:
            self.result.truth.append((event.t, event.payload.x, event.payload.y, event.payload.theta))
            return
        if s == ODOM:
            self._odom(event.payload)
        elif s == LIDAR:
            self._lidar(event.payload)
        elif s == CAMERA:
            self._camera(event.payload, event.t)
        if self.initialized:
            e = self.ekf.latest()
            self.result.fused.append((event.t, e.mean.x, e.mean.y, e.mean.theta))
            self.result.timing.append((event.t, s, time.perf_counter() - t0))

    def _odom(self, delta):
        if not self.initialized:
            return
        self.ekf.ingest(delta)
        if self.mcl is not None:
            self.mcl.add_odometry(delta)
        self.dead = self.dead.compose(delta.as_pose())
        self.result.odom.append((delta.t, self.dead.x, self.dead.y, self.dead.theta))

    def _lidar(self, scan):
        if not self.initialized or self.mcl is None:
            return
        est = self.mcl.update(scan)
        self.result.mcl.append((scan.t, est.mean.x, est.mean.y, est.mean.theta, est.effective_sample_size))
        self.ekf.ingest(est)

    def _camera(self, observations, t):
        c = self.config
        if not c.use_vlp:
            return
        if not self.initialized:
            if self.initial_heading is None or not observations:
                return
            fix = solve_frame(observations, self.led_map, self.initial_heading, c.camera, c.camera_height, c.vlp)
            if fix is None:
                return
            self.result.first_fix_time = fix.t
            self._seed_from_fix(fix)
            self.result.vlp_fixes.append(fix)
            self.result.vlp_only.append(fix)
            return
        if not observations:
            return
        heading = self.ekf.current_heading()
        fix = solve_frame(observations, self.led_map, heading, c.camera, c.camera_height, c.vlp)
        if fix is None:
            return
        if self.result.first_fix_time is None:
            self.result.first_fix_time = fix.t
        self.result.vlp_fixes.append(fix)
        baseline = solve_frame(observations, self.led_map, self.dead.theta, c.camera, c.camera_height, c.vlp)
        if baseline is not None:
            self.result.vlp_only.append(baseline)
        if self.mcl is not None and c.reinit and self._check_divergence(fix):
            return
        self.ekf.ingest(fix)

    def _check_divergence(self, fix: VlpFix):
        """Re-seed MCL and the EKF position after repeated disagreement with confident fixes."""
        c = self.config
        last = self.mcl.last
        if last is None:
            return False
        mean = last.mean.compose(self.mcl.pending)
        cov = floor_covariance(last.covariance, c.divergence_floor ** 2, 0.0)[:2, :2]
        q = max(fix.quality, 1e-6)
        S = cov + np.eye(2) * (c.ekf.vlp_sigma / q) ** 2
        md2 = mahalanobis2(np.array([fix.x - mean.x, fix.y - mean.y]), S)
        if md2 is not None and md2 <= chi2_threshold(2, c.reinit_prob):
            self._diverged = 0
            return False
        self._diverged += 1
        if self._diverged < c.reinit_count:
            return False
        self._diverged = 0
        pose = Pose2D(fix.x, fix.y, mean.theta)
        cov3 = np.diag([c.init_sigma_xy ** 2, c.init_sigma_xy ** 2, c.init_sigma_theta ** 2])
        self.mcl.initialize(pose, cov3, fix.t)
        self.ekf.reset_position(fix.x, fix.y, (c.ekf.vlp_sigma / q) ** 2)
        self.result.reinit_events.append((fix.t, fix.x, fix.y))
        return True

    def run(self, events) -> StackResult:
        for e in events:
            self.process(e)
        if self.initialized:
            self.result.final = self.ekf.latest()
        cnt = self.ekf.counters
        self.result.counters = {
            "rejected_fixes": cnt.rejected_fixes,
            "dropped_measurements": cnt.dropped_measurements,
            "clock_faults": cnt.clock_faults,
            "rejected_inputs": cnt.rejected_inputs,
            "mcl_degenerate": self.mcl.degenerate_count if self.mcl is not None else 0,
            "reinit": len(self.result.reinit_events),
        }
        return self.result


def noise_free_stack(config: StackConfig = StackConfig()) -> StackConfig:
    """Zero-noise limit: exact initialisation, no motion noise, no particle jitter."""
    from .world import OdometryNoise
    zero = OdometryNoise(0.0, 0.0, 0.0, 0.0, config.mcl.noise.rate)
    return replace(config, init_sigma_xy=0.0, init_sigma_theta=0.0,
                   mcl=replace(config.mcl, noise=zero, jitter_xy=0.0, jitter_theta=0.0),
                   ekf=replace(config.ekf, noise=zero))

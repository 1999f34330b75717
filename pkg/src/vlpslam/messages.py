"""Timestamped measurement and estimate records shared between modules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2D


@dataclass(frozen=True)
class OdometryDelta:
    """Relative motion ``(dx, dy, dtheta)`` expressed in the robot frame at ``t0``."""
    dx: float
    dy: float
    dtheta: float
    t: float = 0.0
    t0: float = 0.0

    def as_pose(self) -> Pose2D:
        return Pose2D(self.dx, self.dy, self.dtheta)

    def as_array(self):
        return np.array([self.dx, self.dy, self.dtheta])

    def is_finite(self):
        return all(math.isfinite(v) for v in (self.dx, self.dy, self.dtheta, self.t))


@dataclass(frozen=True, eq=False)
class LidarScan:
    t: float
    ranges: np.ndarray
    hit: np.ndarray
    angle_min: float = 0.0
    angle_step: float = 2.0 * math.pi / 360
    max_range: float = 3.5

    @property
    def beam_count(self):
        return len(self.ranges)

    def angles(self):
        return self.angle_min + self.angle_step * np.arange(len(self.ranges))

    def endpoints(self, stride=1, include_no_return=False, extend=0.0):
        """Beam endpoints in the robot frame, shape (M, 2).

        ``extend`` pushes each endpoint further along its beam, which lets a
        return that lies exactly on a cell boundary score the obstacle cell.
        """
        idx = np.arange(0, len(self.ranges), stride)
        if not include_no_return:
            idx = idx[self.hit[idx]]
        a = self.angle_min + self.angle_step * idx
        r = self.ranges[idx] + extend
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    def __eq__(self, other):
        if not isinstance(other, LidarScan):
            return NotImplemented
        return (self.t == other.t and self.angle_min == other.angle_min
                and self.angle_step == other.angle_step and self.max_range == other.max_range
                and np.array_equal(self.ranges, other.ranges) and np.array_equal(self.hit, other.hit))


@dataclass(frozen=True)
class LedObservation:
    beacon_id: int
    u: float
    v: float
    diameter_px: float
    t: float = 0.0

    @property
    def center_px(self):
        return (self.u, self.v)


@dataclass(frozen=True)
class VlpFix:
    x: float
    y: float
    z: float
    heading_used: float
    beacon_id: int
    t: float
    quality: float

    @property
    def position(self):
        return (self.x, self.y, self.z)


@dataclass(frozen=True, eq=False)
class MclEstimate:
    mean: Pose2D
    covariance: np.ndarray
    effective_sample_size: float
    t: float


@dataclass(frozen=True, eq=False)
class FusedEstimate:
    mean: Pose2D
    covariance: np.ndarray
    t: float
    source: str = "init"

    def __eq__(self, other):
        if not isinstance(other, FusedEstimate):
            return NotImplemented
        return (self.mean == other.mean and self.t == other.t and self.source == other.source
                and np.array_equal(self.covariance, other.covariance))


@dataclass
class Counters:
    rejected_fixes: int = 0
    dropped_measurements: int = 0
    clock_faults: int = 0
    rejected_inputs: int = 0
    extra: dict = field(default_factory=dict)

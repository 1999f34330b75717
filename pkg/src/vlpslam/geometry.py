"""Planar poses and rigid-transform helpers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.remainder(a, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    return a


def wrap_angles(a):
    """Vectorised :func:`wrap_angle`."""
    a = np.asarray(a, dtype=float)
    w = np.remainder(a + math.pi, TWO_PI) - math.pi
    # remainder maps +pi to -pi; the half-open convention here keeps +pi
    return np.where(w <= -math.pi, w + TWO_PI, w)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def compose(self, other: "Pose2D") -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(self.x + c * other.x - s * other.y,
                      self.y + s * other.x + c * other.y,
                      self.theta + other.theta)

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def relative_to(self, base: "Pose2D") -> "Pose2D":
        """Pose of ``self`` expressed in the frame of ``base``."""
        return base.inverse().compose(self)

    def transform_point(self, px: float, py: float):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def is_finite(self) -> bool:
        return math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)


def compose_arrays(poses: np.ndarray, delta) -> np.ndarray:
    """Compose each row of an (N, 3) pose array with per-row or shared deltas."""
    poses = np.asarray(poses, dtype=float)
    d = np.broadcast_to(np.asarray(delta, dtype=float), poses.shape)
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + c * d[:, 0] - s * d[:, 1]
    out[:, 1] = poses[:, 1] + s * d[:, 0] + c * d[:, 1]
    out[:, 2] = wrap_angles(poses[:, 2] + d[:, 2])
    return out

"""Loosely coupled EKF over (x, y, theta) with a timestamp-ordered ingest window."""
from __future__ import annotations

import bisect
import functools
import logging
import math
import threading
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .geometry import Pose2D, wrap_angle
from .messages import Counters, FusedEstimate, MclEstimate, OdometryDelta, VlpFix
from .world import OdometryNoise, rtr_variances

log = logging.getLogger(__name__)

KIND_ODOM, KIND_VLP, KIND_MCL = 0, 1, 2
_SOURCE = {KIND_ODOM: "odom", KIND_VLP: "vlp", KIND_MCL: "mcl"}


class GateRejected(ValueError):
    """Measurement failed the chi-square innovation gate."""


@functools.lru_cache(maxsize=None)
def chi2_threshold(dof, prob=0.99):
    return float(chi2.ppf(prob, dof))


@dataclass(frozen=True)
class EkfParams:
    window: float = 0.150
    future_limit: float = 1.0
    gate_prob: float = 0.99
    gate_vlp: bool = True
    gate_mcl: bool = True
    vlp_sigma: float = 0.01
    mcl_heading_floor: float = math.radians(1.0) ** 2
    mcl_position_floor: float = 0.02 ** 2
    noise: OdometryNoise = OdometryNoise()
    q_floor: tuple = (1e-8, 1e-8, 1e-8)


def symmetrize(P):
    return 0.5 * (P + P.T)


def composition_jacobians(mean, delta):
    """Jacobians of ``mean (+) delta`` w.r.t. the state (F) and the delta (G)."""
    th = mean[2]
    c, s = math.cos(th), math.sin(th)
    dx, dy = delta[0], delta[1]
    F = np.array([[1.0, 0.0, -s * dx - c * dy],
                  [0.0, 1.0, c * dx - s * dy],
                  [0.0, 0.0, 1.0]])
    G = np.array([[c, -s, 0.0],
                  [s, c, 0.0],
                  [0.0, 0.0, 1.0]])
    return F, G


def compose(mean, delta):
    th = mean[2]
    c, s = math.cos(th), math.sin(th)
    return np.array([mean[0] + c * delta[0] - s * delta[1],
                     mean[1] + s * delta[0] + c * delta[1],
                     wrap_angle(th + delta[2])])


def odometry_covariance(delta, noise: OdometryNoise, floor=(0.0, 0.0, 0.0)):
    """Covariance of a delta under the rot-trans-rot model, linearised into (dx, dy, dtheta)."""
    dx, dy, dth = float(delta[0]), float(delta[1]), float(delta[2])
    trans = math.hypot(dx, dy)
    rot1 = math.atan2(dy, dx) if trans > 1e-12 else 0.0
    rot2 = wrap_angle(dth - rot1)
    v1, vt, v2 = rtr_variances(rot1, trans, rot2, noise)
    c, s = math.cos(rot1), math.sin(rot1)
    J = np.array([[-trans * s, c, 0.0],
                  [trans * c, s, 0.0],
                  [1.0, 0.0, 1.0]])
    Q = J @ np.diag([v1, vt, v2]) @ J.T
    return symmetrize(Q) + np.diag(floor)


def predict(state: FusedEstimate, delta: OdometryDelta, Q) -> FusedEstimate:
    if not delta.is_finite() or not np.all(np.isfinite(Q)):
        raise ValueError("non-finite odometry delta")
    if delta.t < state.t:
        raise ValueError(f"odometry at {delta.t} precedes filter time {state.t}")
    m = state.mean.as_array()
    d = delta.as_array()
    F, G = composition_jacobians(m, d)
    P = F @ state.covariance @ F.T + G @ np.asarray(Q, dtype=float) @ G.T
    return FusedEstimate(Pose2D.from_array(compose(m, d)), symmetrize(P), delta.t, state.source)


def gate(innovation, S, dof=None, threshold=None, prob=0.99):
    """Accept iff the squared Mahalanobis distance is at most the chi-square bound."""
    y = np.asarray(innovation, dtype=float)
    S = np.asarray(S, dtype=float)
    dof = len(y) if dof is None else dof
    thr = chi2_threshold(dof, prob) if threshold is None else threshold
    md2 = mahalanobis2(y, S)
    if md2 is None:
        log.warning("innovation covariance singular after regularisation, rejecting")
        return False
    return md2 <= thr


def mahalanobis2(y, S):
    Sr = S + 1e-9 * np.eye(len(y))
    if not np.all(np.isfinite(Sr)) or np.linalg.cond(Sr) > 1e14:
        return None
    return float(y @ np.linalg.solve(Sr, y))


def _update(state, H, y, R, threshold, source, t):
    P = state.covariance
    S = symmetrize(H @ P @ H.T + R)
    if threshold is not None and not gate(y, S, threshold=threshold):
        raise GateRejected(f"{source} innovation outside gate")
    K = np.linalg.solve(S, H @ P).T
    m = state.mean.as_array() + K @ y
    I_KH = np.eye(3) - K @ H
    P = I_KH @ P @ I_KH.T + K @ R @ K.T
    t = state.t if t is None else max(state.t, t)
    return FusedEstimate(Pose2D.from_array(m), symmetrize(P), t, source)


_H_POS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def update_position(state: FusedEstimate, z, R, threshold=None, source="vlp", t=None) -> FusedEstimate:
    """Position-only update (H = [I2 0]); heading moves through the cross-covariance.

    ``threshold`` is the gate bound on the squared Mahalanobis distance; None disables gating.
    """
    R = np.asarray(R, dtype=float)
    y = np.asarray(z, dtype=float)[:2] - state.mean.as_array()[:2]
    return _update(state, _H_POS, y, R, threshold, source, t)


def update_pose(state: FusedEstimate, z: Pose2D, R, threshold=None, source="mcl", t=None) -> FusedEstimate:
    m = state.mean
    y = np.array([z.x - m.x, z.y - m.y, wrap_angle(z.theta - m.theta)])
    return _update(state, np.eye(3), y, np.asarray(R, dtype=float), threshold, source, t)


def floor_covariance(cov, position_floor, heading_floor):
    cov = symmetrize(np.asarray(cov, dtype=float))
    ev, vec = np.linalg.eigh(cov[:2, :2])
    out = cov.copy()
    out[:2, :2] = (vec * np.maximum(ev, position_floor)) @ vec.T
    out[2, 2] = max(out[2, 2], heading_floor)
    # keep the floored matrix PSD if the cross terms now dominate
    ev3 = np.linalg.eigvalsh(out)
    if ev3.min() < 0:
        out[2, :2] = out[:2, 2] = 0.0
    return out


def _kind(m):
    if isinstance(m, OdometryDelta):
        return KIND_ODOM
    if isinstance(m, VlpFix):
        return KIND_VLP
    if isinstance(m, MclEstimate):
        return KIND_MCL
    raise TypeError(f"unsupported measurement {type(m).__name__}")


def _tiebreak(m):
    if isinstance(m, OdometryDelta):
        return (m.dx, m.dy, m.dtheta, m.t0)
    if isinstance(m, VlpFix):
        return (m.x, m.y, m.quality, m.beacon_id)
    return tuple(m.mean.as_array()) + tuple(np.asarray(m.covariance).ravel())


class FusionFilter:
    """EKF with a sliding re-ordering window.

    Measurements are buffered and applied in (timestamp, kind) order once they
    fall out of the window; ``latest()`` applies the pending buffer to a copy,
    so the reported estimate never lags. Calls are serialised by a lock so
    several producer threads may ingest concurrently.
    """

    def __init__(self, params: EkfParams = EkfParams(), on_step=None):
        self.params = params
        self.state: FusedEstimate | None = None
        self.clock = -math.inf
        self.buffer = []
        self.counters = Counters()
        self.on_step = on_step
        self._lock = threading.RLock()
        self._preview = None

    @property
    def initialized(self):
        return self.state is not None

    def initialize(self, pose: Pose2D, covariance, t):
        with self._lock:
            self.state = FusedEstimate(pose, symmetrize(np.asarray(covariance, dtype=float)), t, "init")
            self.clock = max(self.clock, t)
            self.buffer = [b for b in self.buffer if b[0][0] >= t]
            self._preview = None
            return self.state

    def reset_position(self, x, y, var_xy, t=None):
        """Hard re-seat of (x, y) keeping heading; used after a localiser re-initialisation."""
        with self._lock:
            self.flush_until(self.clock - self.params.window)
            s = self.state
            P = s.covariance.copy()
            P[:2, :] = 0.0
            P[:, :2] = 0.0
            P[0, 0] = P[1, 1] = var_xy
            self.state = FusedEstimate(Pose2D(x, y, s.mean.theta), P, s.t, "reinit")
            self._preview = None
            return self.state

    def current_heading(self):
        if self.state is None:
            raise RuntimeError("filter not initialised")
        return self.latest().mean.theta

    def ingest(self, m) -> FusedEstimate:
        with self._lock:
            if self.state is None:
                raise RuntimeError("filter not initialised")
            kind = _kind(m)
            t = m.t
            if not math.isfinite(t):
                self.counters.rejected_inputs += 1
                return self.latest()
            if t > self.clock + self.params.future_limit:
                self.counters.clock_faults += 1
                log.warning("measurement at %.3f is more than %.1fs ahead of the filter clock", t,
                            self.params.future_limit)
                return self.latest()
            if t < self.clock - self.params.window or t < self.state.t:
                self.counters.dropped_measurements += 1
                return self.latest()
            key = (t, kind, _tiebreak(m))
            at_end = not self.buffer or self.buffer[-1][0] <= key
            bisect.insort(self.buffer, (key, m), key=lambda e: e[0])
            # in-order arrivals extend the cached preview instead of replaying the buffer
            if at_end and self._preview is not None:
                self._preview = self._apply(self._preview, kind, m, count=False)
            else:
                self._preview = None
            self.clock = max(self.clock, t)
            self.flush_until(self.clock - self.params.window)
            return self.latest()

    def flush_until(self, t_limit):
        with self._lock:
            while self.buffer and self.buffer[0][0][0] < t_limit:
                (_, kind, _), m = self.buffer.pop(0)
                self.state = self._apply(self.state, kind, m, count=True)

    def flush(self):
        self.flush_until(math.inf)
        return self.state

    def latest(self) -> FusedEstimate:
        with self._lock:
            if self._preview is None:
                s = self.state
                for (_, kind, _), m in self.buffer:
                    s = self._apply(s, kind, m, count=False)
                self._preview = s
            return self._preview

    def _apply(self, s, kind, m, count):
        p = self.params
        try:
            if kind == KIND_ODOM:
                Q = odometry_covariance(m.as_array(), p.noise, p.q_floor)
                out = predict(s, m, Q)
            elif kind == KIND_VLP:
                q = max(m.quality, 1e-6)
                R = np.eye(2) * (p.vlp_sigma / q) ** 2
                thr = chi2_threshold(2, p.gate_prob) if p.gate_vlp else None
                out = update_position(s, (m.x, m.y), R, thr, "vlp", m.t)
            else:
                R = floor_covariance(m.covariance, p.mcl_position_floor, p.mcl_heading_floor)
                thr = chi2_threshold(3, p.gate_prob) if p.gate_mcl else None
                out = update_pose(s, m.mean, R, thr, "mcl", m.t)
        except GateRejected:
            if count:
                self.counters.rejected_fixes += 1
            return s
        except ValueError as e:
            if count:
                self.counters.rejected_inputs += 1
                log.error("rejected %s measurement: %s", _SOURCE[kind], e)
            return s
        if count and self.on_step is not None:
            self.on_step(out, _SOURCE[kind])
        return out


def estimate_record(e: FusedEstimate):
    P = e.covariance
    return {"t": e.t, "x": e.mean.x, "y": e.mean.y, "theta": e.mean.theta,
            "pxx": P[0, 0], "pxy": P[0, 1], "pxt": P[0, 2], "pyy": P[1, 1], "pyt": P[1, 2],
            "ptt": P[2, 2], "source": e.source}

"""Experiment runners: static accuracy, trajectory, map alignment, recovery, navigation.

Each runner takes an :class:`~vlpslam.config.ExperimentConfig`, simulates one
sensor log per run and feeds that same log to every estimator it compares.
"""
from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .config import ExperimentConfig
from .geometry import Pose2D, wrap_angle
from .mapping import build_map, frame_origin_offset, occupancy_iou
from .mcl import build_likelihood_field
from .navigation import navigate
from .reports import ErrorReport, error_rows, render_trajectories
from .scenario import CAMERA, LIDAR, ODOM, TRUTH, DynamicObstacle, Scenario, loop_scenario, run_scenario, stationary
from .stack import LocalizationStack
from .world import project_led


class HarnessError(RuntimeError):
    pass


def sub_seed(*parts):
    """Deterministic 63-bit integer seed derived from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def likelihood_field(cfg: ExperimentConfig):
    m = cfg.stack.mcl
    return build_likelihood_field(cfg.world.grid, m.sigma, m.max_dist)


def in_coverage(world, pose: Pose2D, sim):
    cam = sim.camera
    w, h = cam.image_size
    for b in world.led_map.values():
        u, v, _ = project_led(pose, sim.camera_height, b, cam)
        if 0 <= u < w and 0 <= v < h:
            return True
    return False


def sample_static_poses(cfg: ExperimentConfig, n, rng, clearance=0.155, max_attempts_per_pose=2000):
    """Uniform poses over free space (with ``clearance``) where at least one LED is in view."""
    world = cfg.world
    (x0, y0), (x1, y1) = world.bounds
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > max_attempts_per_pose * n:
            raise HarnessError(f"could only place {len(out)} of {n} poses in free space under LED coverage")
        x, y, th = rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(-math.pi, math.pi)
        if not world.is_free(x, y, clearance):
            continue
        p = Pose2D(x, y, th)
        if in_coverage(world, p, cfg.sim):
            out.append(p)
    return out


def _err(est, truth: Pose2D):
    return math.hypot(est[0] - truth.x, est[1] - truth.y), wrap_angle(est[2] - truth.theta)


def _truth_array(result):
    return np.array(result.truth, dtype=float)


# ---------------------------------------------------------------------------

def run_static_accuracy(cfg: ExperimentConfig, seeds=None, poses=None, lfield=None) -> ErrorReport:
    """Stationary logs at random poses; every estimator runs to the end of each log.

    fused: the full stack seeded from its first fix; slo_vlp: the last fix
    solved with the dead-reckoned heading; mcl: particle filter alone,
    initialised around the true pose.
    """
    sec = cfg.section("static_accuracy")
    seeds = list(cfg.seeds if seeds is None else seeds)
    n = int(sec.get("poses", 400) if poses is None else poses)
    dur = float(sec.get("duration", 2.0))
    sig_h = 0.0 if cfg.noise_free else float(sec.get("heading_sigma", math.radians(1.5)))
    sig_m = 0.0 if cfg.noise_free else float(sec.get("mcl_init_sigma", 0.10))
    lfield = lfield or likelihood_field(cfg)
    want = [e for e in cfg.estimators if e in ("fused", "slo_vlp", "mcl")]
    rows = {e: [] for e in want}
    per_seed = {}
    uninit = 0
    pose_rows = []
    k = 0
    for seed in seeds:
        rng = np.random.default_rng(sub_seed(seed, 0x5A))
        poses_s = sample_static_poses(cfg, n, rng, float(sec.get("clearance", 0.155)))
        seed_err = {e: [] for e in want}
        for i, p in enumerate(poses_s):
            log = run_scenario(cfg.world, stationary(p, dur, f"static-{i}"), sub_seed(seed, i), cfg.sim)
            hr = np.random.default_rng(sub_seed(seed, i, 1))
            h0 = p.theta + sig_h * hr.standard_normal()
            dxy = hr.standard_normal(2)
            rec = {}
            if "fused" in want or "slo_vlp" in want:
                st = LocalizationStack(cfg.world.led_map, lfield, cfg.stack, sub_seed(seed, i, 2))
                st.set_initial_heading(h0)
                r = st.run(log.events)
                if r.final is None:
                    uninit += 1
                    rec["fused"] = (math.inf, math.nan)
                    rec["slo_vlp"] = (math.inf, math.nan)
                else:
                    m = r.final.mean
                    rec["fused"] = _err((m.x, m.y, m.theta), p)
                    f = r.vlp_only[-1]
                    rec["slo_vlp"] = _err((f.x, f.y, f.heading_used), p)
            if "mcl" in want:
                st2 = LocalizationStack(cfg.world.led_map, lfield, replace(cfg.stack, use_vlp=False),
                                        sub_seed(seed, i, 3))
                init = Pose2D(p.x + sig_m * dxy[0], p.y + sig_m * dxy[1], h0)
                st2.initialize(init, np.diag([sig_m ** 2, sig_m ** 2, sig_h ** 2]), 0.0)
                r2 = st2.run(log.events)
                m = r2.mcl[-1]
                rec["mcl"] = _err(m[1:4], p)
            for e in want:
                rows[e].append((k, *rec[e]))
                seed_err[e].append(rec[e][0])
            pose_rows.append((seed, i, p.x, p.y, p.theta, *(rec[e][0] for e in want)))
            k += 1
        per_seed[str(seed)] = {e: float(np.mean(v)) for e, v in seed_err.items()}
    rep = ErrorReport("static_accuracy")
    for e in want:
        rep.add_series(e, rows[e])
    s = rep.summary()
    rep.counters = {"poses": k, "uninitialised": uninit}
    rep.extra = {"per_seed_mean": per_seed, "seeds": seeds, "poses_per_seed": n,
                 "noise_free": cfg.noise_free}
    rep.tables["poses"] = (("seed", "index", "x", "y", "theta") + tuple(f"{e}_error" for e in want), pose_rows)
    if cfg.noise_free:
        # every estimator is exact up to round-off, so the ordering is undefined
        rep.checks["all_below_1mm"] = all(s[e].get("max", math.inf) < 1e-3 for e in want)
    elif {"fused", "slo_vlp", "mcl"} <= set(want):
        rep.checks["ordering"] = s["fused"]["mean"] < s["slo_vlp"]["mean"] < s["mcl"]["mean"]
    if "fused" in want:
        rep.checks["fused_mean_le_5cm"] = s["fused"].get("mean", math.inf) <= 0.05
    return rep


# ---------------------------------------------------------------------------

def trajectory_scenario(cfg: ExperimentConfig):
    sec = cfg.section("trajectory")
    return loop_scenario(int(sec.get("repeats", 2)), float(sec.get("speed", 0.2)),
                         float(sec.get("turn_rate", 0.5)), [tuple(o) for o in sec.get("led_outages", [])])


def _gap_covering(times, a, b):
    """Whether no sample of ``times`` falls inside [a, b)."""
    times = np.asarray(times)
    return not np.any((times >= a) & (times < b))


def _events_after_init(events, init_time):
    """Sensor events the stack handled once initialised, counting the camera frame that seeded it."""
    out = {ODOM: 0, LIDAR: 0, CAMERA: 0}
    if init_time is None:
        return out
    seen = False
    for ev in events:
        if ev.sensor not in out:
            continue
        if not seen and ev.sensor == CAMERA and ev.t == init_time:
            seen = True
        if seen:
            out[ev.sensor] += 1
    return out


def run_trajectory(cfg: ExperimentConfig, seed, lfield=None, log=None) -> ErrorReport:
    sc = trajectory_scenario(cfg)
    if log is None:
        log = run_scenario(cfg.world, sc, seed, cfg.sim)
    lfield = lfield or likelihood_field(cfg)
    st = LocalizationStack(cfg.world.led_map, lfield, cfg.stack, seed)
    st.set_initial_heading(sc.start.theta)
    r = st.run(log.events)
    truth = _truth_array(r)
    rep = ErrorReport("trajectory")
    est = {
        "fused": r.fused,
        "slo_vlp": [(f.t, f.x, f.y, f.heading_used) for f in r.vlp_only],
        "mcl": [m[:4] for m in r.mcl],
        "odometry": r.odom,
    }
    for e in cfg.estimators:
        rep.add_series(e, error_rows(est[e], truth))
    rep.timing = list(r.timing)
    counts = {s: len(log.of(s)) for s in (ODOM, LIDAR, CAMERA, TRUTH)}
    after = _events_after_init(log.events, r.init_time)
    rep.counters = dict(r.counters)
    rep.counters["led_outages"] = [list(o) for o in sc.led_outages]
    rep.extra = {
        "seed": seed,
        "path_length": sc.path_length(),
        "duration": log.duration,
        "init_time": r.init_time,
        "log_events": counts,
        "events_after_init": after,
        "fused_outputs": len(r.fused),
        "timing_cycles": {s: sum(1 for _, ss, _ in r.timing if ss == s) for s in (ODOM, LIDAR, CAMERA)},
    }
    fe = rep.series["fused"] if "fused" in rep.series else error_rows(r.fused, truth)
    fe = np.asarray(fe)
    outage = []
    fused_t = np.array([f[0] for f in r.fused])
    for a, b in sc.led_outages:
        inside = fe[(fe[:, 0] >= a) & (fe[:, 0] < b)]
        dts = np.diff(fused_t[(fused_t >= a - 1.0) & (fused_t < b + 1.0)])
        outage.append({
            "interval": [a, b],
            "fused_max_error": float(inside[:, 1].max()) if len(inside) else math.nan,
            "fused_samples": int(len(inside)),
            "fused_max_dt": float(dts.max()) if len(dts) else math.inf,
            "slo_vlp_fixes": int(sum(1 for f in r.vlp_only if a <= f.t < b)),
            "slo_vlp_gap": _gap_covering([f.t for f in r.vlp_only], a, b),
        })
    rep.extra["outages"] = outage
    rep.checks["fused_outputs_match_events"] = len(r.fused) == sum(after.values())
    for k, o in enumerate(outage):
        rep.checks[f"outage{k}_fused_max_le_15cm"] = o["fused_max_error"] <= 0.15
        rep.checks[f"outage{k}_fused_continuous"] = o["fused_max_dt"] <= 0.1
        rep.checks[f"outage{k}_slo_vlp_gap"] = o["slo_vlp_gap"]
    g = cfg.world.grid
    rep.images["trajectories"] = render_trajectories(cfg.world.occupancy, g, {
        "truth": truth[:, 1:3], "fused": np.array(r.fused)[:, 1:3],
        "odometry": np.array(r.odom)[:, 1:3] if r.odom else np.zeros((0, 2)),
    })
    return rep


# ---------------------------------------------------------------------------

def mapping_scenario(cfg: ExperimentConfig, start=None):
    sec = cfg.section("mapping")
    s = Pose2D(*(start if start is not None else sec.get("start", (3.0, 2.0, 0.0))))
    return Scenario("map_b", s, [tuple(w) for w in sec.get("waypoints", [])],
                    float(sec.get("speed", 0.2)), float(sec.get("turn_rate", 0.5)))


def start_origin_offset(result, start_truth: Pose2D):
    """LED-frame pose of the exported map frame, measured when the map was started.

    The mapper begins at its own origin, so the exported frame sits at
    truth(t0) composed with the inverse of the anchor transform.
    """
    return start_truth.compose(result.anchor.transform.inverse())


def run_mapping_alignment(cfg: ExperimentConfig, seed, start=None, log=None) -> ErrorReport:
    sc = mapping_scenario(cfg, start)
    if log is None:
        log = run_scenario(cfg.world, sc, seed, cfg.sim)
    rep = ErrorReport("mapping")
    extra = {"seed": seed, "start": list(sc.start.as_array()), "start_norm": math.hypot(sc.start.x, sc.start.y)}
    results = {}
    for name, use in (("constrained", True), ("unconstrained", False)):
        mp = replace(cfg.mapper, use_vlp=use, initial_heading=sc.start.theta)
        res = build_map(log.events, mp, cfg.world.led_map)
        results[name] = res
        off = start_origin_offset(res, sc.start)
        mean_off = frame_origin_offset(res)
        truth = np.array(res.truth)
        rep.add_series(name, error_rows(res.trajectory, truth))
        extra[name] = {
            "anchored": bool(res.anchor.anchored),
            "anchor_time": res.anchor.t,
            "anchor": list(res.anchor.transform.as_array()),
            "origin_offset": [off.x, off.y, off.theta],
            "origin_offset_norm": math.hypot(off.x, off.y),
            "run_mean_offset": list(mean_off),
            "run_mean_offset_norm": math.hypot(mean_off[0], mean_off[1]),
            "iou_led_frame": occupancy_iou(res.grid, cfg.world.occupancy, cfg.world.grid.origin_params(),
                                           cfg.world.grid.resolution),
            "scans": res.scans,
            "matched": res.matched,
        }
        a = res.anchor.transform
        rep.maps[f"map_{name}"] = (res.grid, {"anchored": bool(res.anchor.anchored), "anchor": [a.x, a.y, a.theta]})
    rep.extra = extra
    res = 0.05
    rep.checks["constrained_offset_lt_cell"] = extra["constrained"]["origin_offset_norm"] < res
    rep.checks["unconstrained_offset_eq_start"] = abs(extra["unconstrained"]["origin_offset_norm"]
                                                      - extra["start_norm"]) <= res
    return rep


# ---------------------------------------------------------------------------

def recovery_scenario(cfg: ExperimentConfig):
    sec = cfg.section("recovery")
    return Scenario("recovery", Pose2D(*sec.get("start", (1.1, 8.0, -math.pi / 2))),
                    [tuple(w) for w in sec.get("waypoints", [(1.1, 2.6), (3.5, 2.6)])],
                    settle=float(sec.get("settle", 2.0)))


def run_recovery(cfg: ExperimentConfig, seed, lfield=None, log=None) -> ErrorReport:
    sec = cfg.section("recovery")
    sc = recovery_scenario(cfg)
    wrong = Pose2D(*sec.get("wrong_start", (7.1, 8.0, -math.pi / 2)))
    thr = float(sec.get("threshold", 0.10))
    if log is None:
        log = run_scenario(cfg.world, sc, seed, cfg.sim)
    lfield = lfield or likelihood_field(cfg)
    c = cfg.stack
    cov = np.diag([c.init_sigma_xy ** 2, c.init_sigma_xy ** 2, c.init_sigma_theta ** 2])
    rep = ErrorReport("recovery")
    extra = {"seed": seed, "threshold": thr, "wrong_start": list(wrong.as_array())}
    for name, init, use_vlp in (("fused", wrong, True), ("fused_no_vlp", wrong, False),
                                ("fused_correct_init", sc.start, True)):
        st = LocalizationStack(cfg.world.led_map, lfield, replace(c, use_vlp=use_vlp), seed)
        st.initialize(init, cov, 0.0)
        r = st.run(log.events)
        rows = np.asarray(error_rows(r.fused, _truth_array(r)))
        rep.add_series(name, rows)
        ff = r.first_fix_time
        rec_t = None
        if ff is not None:
            hit = rows[(rows[:, 0] >= ff) & (rows[:, 1] < thr)]
            rec_t = float(hit[0, 0]) if len(hit) else None
        extra[name] = {
            "first_fix_time": ff,
            "recovery_time": rec_t,
            "time_to_recovery": None if rec_t is None else rec_t - ff,
            "reinit_events": [list(e) for e in r.reinit_events],
            "min_error": float(rows[:, 1].min()),
            "max_error": float(rows[:, 1].max()),
            "final_error": float(rows[-1, 1]),
        }
    rep.extra = extra
    e = extra["fused"]
    rep.checks["recovers_within_2s"] = e["time_to_recovery"] is not None and e["time_to_recovery"] <= 2.0
    rep.checks["reinit_logged"] = len(e["reinit_events"]) > 0
    rep.checks["lost_without_vlp"] = extra["fused_no_vlp"]["min_error"] > 1.0
    rep.checks["correct_init_no_reinit"] = len(extra["fused_correct_init"]["reinit_events"]) == 0
    rep.checks["correct_init_below_threshold"] = extra["fused_correct_init"]["max_error"] <= thr
    return rep


# ---------------------------------------------------------------------------

def navigation_scenarios(cfg: ExperimentConfig):
    out = []
    for d in cfg.section("navigation").get("scenarios", []):
        obs = [DynamicObstacle(tuple(o["center"]), tuple(o.get("size", (0.3, 0.3))),
                               tuple(o.get("velocity", (0.0, 0.0))), float(o.get("t_start", 0.0)),
                               float(o.get("t_end", math.inf))) for o in d.get("obstacles", [])]
        out.append((d["id"], Pose2D(*d["start"]), Pose2D(*d["goal"]), obs))
    return out


def run_navigation(cfg: ExperimentConfig, seed, lfield=None, scenarios=None, path_factor=1.3) -> ErrorReport:
    lfield = lfield or likelihood_field(cfg)
    scen = navigation_scenarios(cfg) if scenarios is None else scenarios
    rep = ErrorReport("navigation")
    rows = []
    paths = {}
    results = {}
    for sid, start, goal, obs in scen:
        r = navigate(cfg.world, cfg.sim, cfg.stack, start, goal, sub_seed(seed, sum(map(ord, sid))), obs,
                     cfg.navigator, lfield, scenario_id=sid)
        results[sid] = r
        tr = r.trajectory
        errs = [(t[0], math.hypot(t[4] - t[1], t[5] - t[2]), wrap_angle(t[6] - t[3])) for t in tr
                if math.isfinite(t[4])]
        rep.add_series(sid, errs)
        ratio = r.executed_length / r.planned_length if r.planned_length > 0 else math.nan
        truth_goal = math.hypot(r.final_truth.x - goal.x, r.final_truth.y - goal.y)
        rows.append((sid, len(obs), int(r.success), r.reason, r.time, r.executed_length, r.planned_length,
                     ratio, r.collisions, r.footprint_events, r.unsafe_commands, r.replans,
                     r.fallback_commands, r.min_clearance, truth_goal))
        paths[sid] = np.array([(t[1], t[2]) for t in tr])
        rep.checks[f"{sid}_success"] = r.success
        rep.checks[f"{sid}_no_footprint_events"] = r.footprint_events == 0 and r.collisions == 0
        rep.checks[f"{sid}_commands_collision_free"] = r.unsafe_commands == 0
        rep.checks[f"{sid}_path_ratio"] = r.success and ratio <= path_factor
    rep.tables["scenarios"] = (("scenario", "obstacles", "success", "reason", "time", "executed_length",
                                "planned_length", "ratio", "collisions", "footprint_events", "unsafe_commands",
                                "replans", "fallback_commands", "min_clearance", "truth_goal_distance"), rows)
    rep.extra = {"seed": seed, "scenarios": len(rows), "successes": sum(r[2] for r in rows),
                 "dynamic": sum(1 for r in rows if r[1] > 0)}
    rep.counters = {"collisions": sum(r[8] for r in rows), "footprint_events": sum(r[9] for r in rows),
                    "unsafe_commands": sum(r[10] for r in rows), "replans": sum(r[11] for r in rows)}
    rep.images["paths"] = render_trajectories(cfg.world.occupancy, cfg.world.grid,
                                              {f"truth_{k}": v for k, v in paths.items()})
    rep._results = results
    return rep

"""Error reports and their on-disk forms: CSV tables, a JSON summary, PGM/PPM renders."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angles
from .grid import OccupancyGrid, save_map, write_pgm, write_ppm

FORMATS = ("csv", "json", "images")

# colours for trajectory renders
COLOURS = {
    "truth": (0, 160, 0),
    "fused": (220, 0, 0),
    "slo_vlp": (0, 0, 230),
    "mcl": (230, 140, 0),
    "odometry": (150, 0, 150),
}


@dataclass
class ErrorReport:
    name: str
    series: dict = field(default_factory=dict)     # estimator -> (n, 3): t, position error, heading error
    counters: dict = field(default_factory=dict)
    timing: list = field(default_factory=list)     # (t, sensor, seconds)
    extra: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)     # named pass/fail outcomes
    tables: dict = field(default_factory=dict)     # name -> (header, rows)
    images: dict = field(default_factory=dict)     # name -> uint8 array (h, w) or (h, w, 3)
    maps: dict = field(default_factory=dict)       # name -> (OccupancyGrid, extra metadata)

    def add_series(self, estimator, rows):
        a = np.asarray(rows, dtype=float).reshape(-1, 3)
        self.series[estimator] = a

    def summary(self):
        return {k: summarize(v[:, 1], v[:, 2]) for k, v in sorted(self.series.items())}

    def cdf(self, estimator):
        return cdf_table(self.series[estimator][:, 1])

    @property
    def passed(self):
        return all(self.checks.values())


def summarize(pos_err, head_err=None):
    e = np.asarray(pos_err, dtype=float)
    e = e[np.isfinite(e)]
    if e.size == 0:
        return {"count": 0}
    out = {
        "count": int(e.size),
        "mean": float(np.mean(e)),
        "max": float(np.max(e)),
        "p50": float(np.percentile(e, 50)),
        "p90": float(np.percentile(e, 90)),
        "p95": float(np.percentile(e, 95)),
    }
    if head_err is not None:
        h = np.abs(np.asarray(head_err, dtype=float))
        h = h[np.isfinite(h)]
        if h.size:
            out["heading_mean"] = float(np.mean(h))
            out["heading_max"] = float(np.max(h))
    return out


def cdf_table(errors):
    """Sorted errors with their empirical cumulative fraction; the last row is 1.0."""
    e = np.sort(np.asarray(errors, dtype=float)[np.isfinite(errors)])
    n = e.size
    return [(float(v), (i + 1) / n) for i, v in enumerate(e)]


def error_rows(estimates, truth):
    """(t, position error, heading error) for estimate rows (t, x, y, theta).

    ``truth`` is a (t, x, y, theta) array; estimate times are matched exactly
    when possible and interpolated otherwise.
    """
    from .mapping import interpolate_pose
    truth = np.asarray(truth, dtype=float)
    out = []
    for t, x, y, th in estimates:
        p = interpolate_pose(truth, t)
        out.append((t, math.hypot(x - p.x, y - p.y), float(wrap_angles(th - p.theta))))
    return out


def timing_summary(timing):
    out = {}
    if not timing:
        return out
    sensors = sorted({s for _, s, _ in timing})
    for s in sensors + ["all"]:
        v = np.array([d for _, ss, d in timing if s == "all" or ss == s])
        out[s] = {"count": int(v.size), "mean": float(v.mean()), "max": float(v.max()),
                  "p95": float(np.percentile(v, 95))}
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _json_ready(o):
    if isinstance(o, dict):
        return {str(k): _json_ready(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_ready(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return _json_ready(o.tolist())
    return o


def write_json(path, doc):
    with open(path, "w") as f:
        json.dump(_json_ready(doc), f, sort_keys=True, indent=2)
        f.write("\n")


def emit_reports(report: ErrorReport, outdir, formats=FORMATS):
    """Write every table of ``report`` under ``outdir``; returns the written paths.

    Everything except the ``*_timing.*`` files (wall-clock measurements) is a
    pure function of the report contents.
    """
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    os.makedirs(outdir, exist_ok=True)
    n = report.name
    written = []

    def path(suffix):
        p = os.path.join(outdir, f"{n}_{suffix}")
        written.append(p)
        return p

    if "csv" in formats:
        rows = []
        cdf_rows = []
        for est in sorted(report.series):
            for t, e, h in report.series[est]:
                rows.append((est, float(t), float(e), float(h)))
            for e, c in report.cdf(est):
                cdf_rows.append((est, e, c))
        _write_csv(path("errors.csv"), ("estimator", "t", "position_error", "heading_error"), rows)
        _write_csv(path("cdf.csv"), ("estimator", "error", "cumulative"), cdf_rows)
        for name in sorted(report.tables):
            header, trows = report.tables[name]
            _write_csv(path(f"{name}.csv"), header, trows)
        if report.timing:
            _write_csv(path("timing.csv"), ("t", "sensor", "seconds"),
                       [(float(t), s, float(d)) for t, s, d in report.timing])
    if "json" in formats:
        write_json(path("summary.json"), {
            "name": n,
            "errors": report.summary(),
            "counters": report.counters,
            "extra": report.extra,
            "checks": report.checks,
            "passed": report.passed,
        })
        if report.timing:
            write_json(path("timing.json"), timing_summary(report.timing))
    if "images" in formats:
        for name in sorted(report.images):
            img = report.images[name]
            if img.ndim == 2:
                write_pgm(path(f"{name}.pgm"), img)
            else:
                write_ppm(path(f"{name}.ppm"), img)
        for name in sorted(report.maps):
            grid, meta = report.maps[name]
            y = path(f"{name}.yaml")
            save_map(grid, y, extra=meta)
            written.append(os.path.splitext(y)[0] + ".pgm")
    return written


# ---------------------------------------------------------------------------
# renders

def render_occupancy(occ):
    """Grey background image (row 0 at the top) of a boolean occupancy array."""
    img = np.full(occ.shape + (3,), 255, dtype=np.uint8)
    img[occ] = (40, 40, 40)
    return img[::-1].copy()


def draw_polyline(img, grid: OccupancyGrid, xy, colour):
    """Draw a world-frame polyline onto an image made by :func:`render_occupancy`."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    xy = xy[np.all(np.isfinite(xy), axis=1)]
    if len(xy) == 0:
        return img
    h, w = img.shape[:2]
    pts = [xy[:1]]
    step = 0.5 * grid.resolution
    for a, b in zip(xy[:-1], xy[1:]):
        k = max(1, int(math.ceil(math.dist(a, b) / step)))
        f = np.arange(1, k + 1)[:, None] / k
        pts.append(a + f * (b - a))
    p = np.concatenate(pts)
    gx, gy = grid.world_to_grid(p[:, 0], p[:, 1])
    ix, iy = np.floor(gx).astype(int), np.floor(gy).astype(int)
    ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    img[h - 1 - iy[ok], ix[ok]] = colour
    return img


def render_trajectories(occ, grid: OccupancyGrid, paths: dict):
    img = render_occupancy(occ)
    for name in sorted(paths):
        draw_polyline(img, grid, paths[name], COLOURS.get(name, (0, 120, 120)))
    return img

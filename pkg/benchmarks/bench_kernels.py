"""Time the hot kernels under numba and under the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once per backend to warm up (numba compiles on first
call), then timed over ``--repeat`` calls; outputs of the two backends are
compared before any timing is printed.
"""
import argparse
import math
import time

import numpy as np

from vlpslam import _accel, kernels
from vlpslam.mcl import build_likelihood_field
from vlpslam.world import build_lab_world


def cases(world):
    occ = world.occupancy
    org = world.grid.origin_params()
    rng = np.random.default_rng(0)
    angles = np.arange(360) * 2 * math.pi / 360
    ranges, hit = kernels.raycast(occ, org, 3.0, 2.0, angles, 3.5)
    lf = build_likelihood_field(world.grid)
    table, outside = lf.log_table(0.05)
    poses = np.column_stack([3.0 + 0.1 * rng.standard_normal(500), 2.0 + 0.1 * rng.standard_normal(500),
                             0.05 * rng.standard_normal(500)])
    pts = np.column_stack([ranges * np.cos(angles), ranges * np.sin(angles)])[hit][::4]
    blocked = kernels.edt_squared(occ) < 9
    clear = np.sqrt(kernels.edt_squared(occ)) * 0.05
    vs = np.repeat(np.linspace(0, 0.22, 11), 21)
    ws = np.tile(np.linspace(-1, 1, 21), 11)
    return {
        "raycast 360 beams": lambda: kernels.raycast(occ, org, 3.0, 2.0, angles, 3.5),
        "mark_rays 360 beams": lambda: kernels.mark_rays(occ.shape, org, 3.0, 2.0, angles, ranges + 1e-3, hit),
        "edt 216x240": lambda: kernels.edt_squared(occ),
        "score 500 poses x 90 beams": lambda: kernels.score_poses(table, outside, org, poses, pts),
        "bilinear 500 poses x 90 beams": lambda: kernels.score_poses(table, outside, org, poses, pts, True),
        "rollout 231 samples x 30 steps": lambda: kernels.rollout(blocked, clear, org, (3.0, 2.0, 0.0),
                                                                 vs, ws, 0.05, 30),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9, atol=1e-9)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    world = build_lab_world()
    results = {}
    prev = _accel.numba_enabled()
    try:
        for flag in (True, False):
            _accel.use_numba(flag)
            for name, fn in cases(world).items():
                out = fn()
                t0 = time.perf_counter()
                for _ in range(args.repeat):
                    fn()
                results.setdefault(name, {})[flag] = ((time.perf_counter() - t0) / args.repeat, out)
    finally:
        _accel.use_numba(prev)
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for name, r in results.items():
        (tn, on), (tp, op) = r[True], r[False]
        print(f"{name:34s} {1e3 * tn:10.3f} {1e3 * tp:10.3f} {tp / tn:8.1f}  {_same(on, op)}")


if __name__ == "__main__":
    main()

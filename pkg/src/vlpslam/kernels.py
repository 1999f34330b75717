"""Hot inner loops.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorised numpy version. The public functions pick one according to
:mod:`vlpslam._accel`. Trigonometry and frame changes happen in the public
wrappers so both backends see identical inputs; the ray traversals and the
distance transform then agree bit for bit.
"""
import math

import numpy as np

from . import _accel
from ._accel import njit

BIG = 1e20


def _to_grid(origin, x, y):
    ox, oy, oth, res = origin
    c, s = math.cos(oth), math.sin(oth)
    dx, dy = x - ox, y - oy
    return (c * dx + s * dy) / res, (-s * dx + c * dy) / res


# ---------------------------------------------------------------------------
# ray traversal

@njit
def _raycast_nb(occ, gx, gy, dirx, diry, max_t):
    n = dirx.shape[0]
    h, w = occ.shape
    out_t = np.empty(n)
    out_hit = np.zeros(n, dtype=np.bool_)
    ix0 = int(math.floor(gx))
    iy0 = int(math.floor(gy))
    for b in range(n):
        dx = dirx[b]
        dy = diry[b]
        ix = ix0
        iy = iy0
        if dx > 0.0:
            sx = 1
            tdx = 1.0 / dx
            tmx = (ix + 1 - gx) * tdx
        elif dx < 0.0:
            sx = -1
            tdx = 1.0 / -dx
            tmx = (gx - ix) * tdx
        else:
            sx = 0
            tdx = np.inf
            tmx = np.inf
        if dy > 0.0:
            sy = 1
            tdy = 1.0 / dy
            tmy = (iy + 1 - gy) * tdy
        elif dy < 0.0:
            sy = -1
            tdy = 1.0 / -dy
            tmy = (gy - iy) * tdy
        else:
            sy = 0
            tdy = np.inf
            tmy = np.inf
        t = 0.0
        out_t[b] = max_t
        while True:
            if ix < 0 or ix >= w or iy < 0 or iy >= h:
                break
            if occ[iy, ix]:
                out_t[b] = t
                out_hit[b] = True
                break
            if tmx < tmy:
                t = tmx
                tmx += tdx
                ix += sx
            else:
                t = tmy
                tmy += tdy
                iy += sy
            if t > max_t:
                break
    return out_t, out_hit


def _dda_setup(gx, gy, dirx, diry):
    n = dirx.shape[0]
    ix = np.full(n, math.floor(gx), dtype=np.int64)
    iy = np.full(n, math.floor(gy), dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdx = np.where(dirx != 0.0, 1.0 / np.abs(dirx), np.inf)
        tdy = np.where(diry != 0.0, 1.0 / np.abs(diry), np.inf)
        tmx = np.where(dirx > 0.0, (ix + 1 - gx) * tdx, np.where(dirx < 0.0, (gx - ix) * tdx, np.inf))
        tmy = np.where(diry > 0.0, (iy + 1 - gy) * tdy, np.where(diry < 0.0, (gy - iy) * tdy, np.inf))
    sx = np.sign(dirx).astype(np.int64)
    sy = np.sign(diry).astype(np.int64)
    return ix, iy, sx, sy, tdx, tdy, tmx, tmy


def _raycast_np(occ, gx, gy, dirx, diry, max_t):
    h, w = occ.shape
    n = dirx.shape[0]
    ix, iy, sx, sy, tdx, tdy, tmx, tmy = _dda_setup(gx, gy, dirx, diry)
    t = np.zeros(n)
    out_t = np.full(n, float(max_t))
    out_hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    while active.any():
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        active &= inside
        hit = np.zeros(n, dtype=bool)
        hit[active] = occ[iy[active], ix[active]].astype(bool)
        out_t[hit] = t[hit]
        out_hit |= hit
        active &= ~hit
        stepx = active & (tmx < tmy)
        stepy = active & ~stepx
        t[stepx] = tmx[stepx]
        tmx[stepx] += tdx[stepx]
        ix[stepx] += sx[stepx]
        t[stepy] = tmy[stepy]
        tmy[stepy] += tdy[stepy]
        iy[stepy] += sy[stepy]
        active &= ~(t > max_t)
    return out_t, out_hit


def raycast(occ, origin, x, y, angles, max_range):
    """First-hit range per beam on a boolean grid.

    ``origin`` is ``(ox, oy, otheta, resolution)``; ``angles`` are world-frame
    beam directions. Returns ``(ranges, hit)``; beams that leave the grid or
    travel past ``max_range`` report ``max_range`` with ``hit`` False. The range
    of a hit is the distance to where the beam enters the occupied cell.
    """
    res = origin[3]
    gx, gy = _to_grid(origin, x, y)
    a = np.asarray(angles, dtype=float) - origin[2]
    dirx, diry = np.cos(a), np.sin(a)
    occ = np.ascontiguousarray(occ, dtype=np.bool_)
    max_t = max_range / res
    fn = _raycast_nb if _accel.numba_enabled() else _raycast_np
    t, hit = fn(occ, gx, gy, dirx, diry, max_t)
    ranges = np.where(hit, t * res, max_range)
    return ranges, hit


@njit
def _mark_rays_nb(update, gx, gy, dirx, diry, tend, hit):
    h, w = update.shape
    n = dirx.shape[0]
    ix0 = int(math.floor(gx))
    iy0 = int(math.floor(gy))
    for b in range(n):
        dx = dirx[b]
        dy = diry[b]
        ix = ix0
        iy = iy0
        if dx > 0.0:
            sx = 1
            tdx = 1.0 / dx
            tmx = (ix + 1 - gx) * tdx
        elif dx < 0.0:
            sx = -1
            tdx = 1.0 / -dx
            tmx = (gx - ix) * tdx
        else:
            sx = 0
            tdx = np.inf
            tmx = np.inf
        if dy > 0.0:
            sy = 1
            tdy = 1.0 / dy
            tmy = (iy + 1 - gy) * tdy
        elif dy < 0.0:
            sy = -1
            tdy = 1.0 / -dy
            tmy = (gy - iy) * tdy
        else:
            sy = 0
            tdy = np.inf
            tmy = np.inf
        te = tend[b]
        while True:
            if ix < 0 or ix >= w or iy < 0 or iy >= h:
                break
            texit = tmx if tmx < tmy else tmy
            if te < texit:
                if hit[b]:
                    update[iy, ix] = 2
                elif update[iy, ix] == 0:
                    update[iy, ix] = 1
                break
            if update[iy, ix] == 0:
                update[iy, ix] = 1
            if tmx < tmy:
                tmx += tdx
                ix += sx
            else:
                tmy += tdy
                iy += sy
    return update


def _mark_rays_np(update, gx, gy, dirx, diry, tend, hit):
    h, w = update.shape
    ix, iy, sx, sy, tdx, tdy, tmx, tmy = _dda_setup(gx, gy, dirx, diry)
    active = np.ones(dirx.shape[0], dtype=bool)
    free_x, free_y, occ_x, occ_y = [], [], [], []
    while active.any():
        active &= (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        texit = np.minimum(tmx, tmy)
        end = active & (tend < texit)
        occ_x.append(ix[end & hit])
        occ_y.append(iy[end & hit])
        passing = active & ~(end & hit)
        free_x.append(ix[passing])
        free_y.append(iy[passing])
        active &= ~end
        stepx = active & (tmx < tmy)
        stepy = active & ~stepx
        tmx[stepx] += tdx[stepx]
        ix[stepx] += sx[stepx]
        tmy[stepy] += tdy[stepy]
        iy[stepy] += sy[stepy]
    fx, fy = np.concatenate(free_x), np.concatenate(free_y)
    sel = update[fy, fx] == 0
    update[fy[sel], fx[sel]] = 1
    update[np.concatenate(occ_y), np.concatenate(occ_x)] = 2
    return update


def mark_rays(shape, origin, x, y, angles, ranges, hit):
    """Per-cell update labels for one scan: 0 untouched, 1 traversed, 2 endpoint hit.

    A cell reached by any hit endpoint is labelled 2 regardless of beam order;
    every other cell a beam passes through (including a no-return beam's last
    cell) is labelled 1.
    """
    res = origin[3]
    gx, gy = _to_grid(origin, x, y)
    a = np.asarray(angles, dtype=float) - origin[2]
    dirx, diry = np.cos(a), np.sin(a)
    tend = np.asarray(ranges, dtype=float) / res
    hit = np.ascontiguousarray(hit, dtype=np.bool_)
    update = np.zeros(shape, dtype=np.int8)
    fn = _mark_rays_nb if _accel.numba_enabled() else _mark_rays_np
    return fn(update, gx, gy, dirx, diry, tend, hit)


# ---------------------------------------------------------------------------
# exact Euclidean distance transform (squared, in cells)

@njit
def _dt1d_nb(f, d, v, z):
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit
def _edt_sq_nb(occ):
    h, w = occ.shape
    n = max(h, w)
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    g = np.empty((h, w))
    for x in range(w):
        for y in range(h):
            f[y] = 0.0 if occ[y, x] else BIG
        _dt1d_nb(f[:h], d[:h], v, z)
        for y in range(h):
            g[y, x] = d[y]
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            f[x] = g[y, x]
        _dt1d_nb(f[:w], d[:w], v, z)
        for x in range(w):
            out[y, x] = d[x]
    return out


def _edt_sq_np(occ):
    h, w = occ.shape
    idx = np.arange(h)[:, None] * np.ones((1, w), dtype=np.int64)
    big = 4 * (h + w + 1)
    above = np.where(occ, idx, -big)
    above = np.maximum.accumulate(above, axis=0)
    below = np.where(occ, idx, 2 * big)
    below = np.minimum.accumulate(below[::-1], axis=0)[::-1]
    col = np.minimum(idx - above, below - idx).astype(np.float64)
    g2 = np.where(col < big, col * col, BIG)
    xs = np.arange(w, dtype=np.float64)
    dx2 = (xs[:, None] - xs[None, :]) ** 2
    out = np.empty((h, w))
    chunk = max(1, int(4e6 // (w * w)))
    for y0 in range(0, h, chunk):
        blk = g2[y0:y0 + chunk]
        out[y0:y0 + chunk] = np.min(blk[:, None, :] + dx2[None, :, :], axis=2)
    return out


def edt_squared(occ):
    """Squared distance (cells^2) from each cell centre to the nearest occupied cell centre.

    Grids with no occupied cell yield values >= ``BIG``.
    """
    occ = np.ascontiguousarray(occ, dtype=np.bool_)
    if _accel.numba_enabled():
        return _edt_sq_nb(occ)
    return _edt_sq_np(occ)


# ---------------------------------------------------------------------------
# likelihood-field scoring

@njit
def _score_nb(table, outside, px, py, c, s, bx, by):
    h, w = table.shape
    n = px.shape[0]
    m = bx.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            ix = int(math.floor(px[i] + c[i] * bx[j] - s[i] * by[j]))
            iy = int(math.floor(py[i] + s[i] * bx[j] + c[i] * by[j]))
            if ix < 0 or ix >= w or iy < 0 or iy >= h:
                acc += outside
            else:
                acc += table[iy, ix]
        out[i] = acc
    return out


def _score_np(table, outside, px, py, c, s, bx, by):
    h, w = table.shape
    ix = np.floor(px[:, None] + c[:, None] * bx[None, :] - s[:, None] * by[None, :]).astype(np.int64)
    iy = np.floor(py[:, None] + s[:, None] * bx[None, :] + c[:, None] * by[None, :]).astype(np.int64)
    inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
    vals = np.full(ix.shape, outside)
    vals[inside] = table[iy[inside], ix[inside]]
    return _sum_columns(vals)


def _sum_columns(vals):
    # sequential accumulation, same order as the compiled loop
    acc = np.zeros(vals.shape[0])
    for j in range(vals.shape[1]):
        acc += vals[:, j]
    return acc


@njit
def _bilinear_nb(table, outside, px, py, c, s, bx, by):
    h, w = table.shape
    n = px.shape[0]
    m = bx.shape[0]
    out = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            u = px[i] + c[i] * bx[j] - s[i] * by[j] - 0.5
            v = py[i] + s[i] * bx[j] + c[i] * by[j] - 0.5
            i0 = int(math.floor(u))
            j0 = int(math.floor(v))
            fx = u - i0
            fy = v - j0
            v00 = outside
            v10 = outside
            v01 = outside
            v11 = outside
            if 0 <= j0 < h:
                if 0 <= i0 < w:
                    v00 = table[j0, i0]
                if 0 <= i0 + 1 < w:
                    v10 = table[j0, i0 + 1]
            if 0 <= j0 + 1 < h:
                if 0 <= i0 < w:
                    v01 = table[j0 + 1, i0]
                if 0 <= i0 + 1 < w:
                    v11 = table[j0 + 1, i0 + 1]
            top = v00 * (1.0 - fx) + v10 * fx
            bot = v01 * (1.0 - fx) + v11 * fx
            acc += top * (1.0 - fy) + bot * fy
        out[i] = acc
    return out


def _bilinear_np(table, outside, px, py, c, s, bx, by):
    h, w = table.shape
    u = px[:, None] + c[:, None] * bx[None, :] - s[:, None] * by[None, :] - 0.5
    v = py[:, None] + s[:, None] * bx[None, :] + c[:, None] * by[None, :] - 0.5
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fx = u - i0
    fy = v - j0

    def tap(ii, jj):
        ok = (ii >= 0) & (ii < w) & (jj >= 0) & (jj < h)
        out = np.full(ii.shape, outside)
        out[ok] = table[jj[ok], ii[ok]]
        return out

    top = tap(i0, j0) * (1.0 - fx) + tap(i0 + 1, j0) * fx
    bot = tap(i0, j0 + 1) * (1.0 - fx) + tap(i0 + 1, j0 + 1) * fx
    return _sum_columns(top * (1.0 - fy) + bot * fy)


def score_poses(table, outside, origin, poses, points, interpolate=False):
    """Sum of ``table`` lookups at scan endpoints for each candidate pose.

    ``poses`` is an (N, 3) world-frame array, ``points`` an (M, 2) array of
    endpoints in the robot frame (metres). Endpoints off the grid score
    ``outside``. With ``interpolate`` the table is read bilinearly between
    cell centres instead of by nearest cell.
    """
    ox, oy, oth, res = origin
    poses = np.atleast_2d(np.asarray(poses, dtype=float))
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    c0, s0 = math.cos(oth), math.sin(oth)
    dx, dy = poses[:, 0] - ox, poses[:, 1] - oy
    px = (c0 * dx + s0 * dy) / res
    py = (-s0 * dx + c0 * dy) / res
    th = poses[:, 2] - oth
    c, s = np.cos(th), np.sin(th)
    bx = points[:, 0] / res
    by = points[:, 1] / res
    table = np.ascontiguousarray(table, dtype=np.float64)
    if interpolate:
        fn = _bilinear_nb if _accel.numba_enabled() else _bilinear_np
    else:
        fn = _score_nb if _accel.numba_enabled() else _score_np
    return fn(table, float(outside), px, py, c, s, np.ascontiguousarray(bx), np.ascontiguousarray(by))


# ---------------------------------------------------------------------------
# DWA forward simulation

@njit
def _rollout_nb(blocked, clearance, gx, gy, th, vs, ws, dt, steps):
    h, w = blocked.shape
    n = vs.shape[0]
    end = np.empty((n, 3))
    collide = np.zeros(n, dtype=np.bool_)
    min_clear = np.empty(n)
    for i in range(n):
        x = gx
        y = gy
        t = th
        v = vs[i]
        om = ws[i]
        mc = np.inf
        for _ in range(steps):
            if abs(om) > 1e-9:
                x += v / om * (math.sin(t + om * dt) - math.sin(t))
                y -= v / om * (math.cos(t + om * dt) - math.cos(t))
            else:
                x += v * dt * math.cos(t)
                y += v * dt * math.sin(t)
            t += om * dt
            ix = int(math.floor(x))
            iy = int(math.floor(y))
            if ix < 0 or ix >= w or iy < 0 or iy >= h or blocked[iy, ix]:
                collide[i] = True
                mc = 0.0
                break
            cv = clearance[iy, ix]
            if cv < mc:
                mc = cv
        end[i, 0] = x
        end[i, 1] = y
        end[i, 2] = t
        min_clear[i] = mc
    return end, collide, min_clear


def _rollout_np(blocked, clearance, gx, gy, th, vs, ws, dt, steps):
    h, w = blocked.shape
    n = vs.shape[0]
    x = np.full(n, gx)
    y = np.full(n, gy)
    t = np.full(n, th)
    collide = np.zeros(n, dtype=bool)
    mc = np.full(n, np.inf)
    arc = np.abs(ws) > 1e-9
    safe_w = np.where(arc, ws, 1.0)
    for _ in range(steps):
        live = ~collide
        nx = np.where(arc, x + vs / safe_w * (np.sin(t + ws * dt) - np.sin(t)), x + vs * dt * np.cos(t))
        ny = np.where(arc, y - vs / safe_w * (np.cos(t + ws * dt) - np.cos(t)), y + vs * dt * np.sin(t))
        x = np.where(live, nx, x)
        y = np.where(live, ny, y)
        t = np.where(live, t + ws * dt, t)
        ix = np.floor(x).astype(np.int64)
        iy = np.floor(y).astype(np.int64)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        bad = np.ones(n, dtype=bool)
        bad[inside] = blocked[iy[inside], ix[inside]]
        newly = live & bad
        collide |= newly
        mc[newly] = 0.0
        ok = live & ~bad
        mc[ok] = np.minimum(mc[ok], clearance[iy[ok], ix[ok]])
    return np.stack([x, y, t], axis=1), collide, mc


def rollout(blocked, clearance, origin, pose, vs, ws, dt, steps):
    """Forward-simulate constant (v, w) commands on a costmap.

    Returns world-frame end poses, a collision flag per sample (any visited
    cell blocked or off-map) and the minimum ``clearance`` value visited.
    """
    ox, oy, oth, res = origin
    gx, gy = _to_grid(origin, pose[0], pose[1])
    th = pose[2] - oth
    vs = np.ascontiguousarray(vs, dtype=float) / res
    ws = np.ascontiguousarray(ws, dtype=float)
    blocked = np.ascontiguousarray(blocked, dtype=np.bool_)
    clearance = np.ascontiguousarray(clearance, dtype=np.float64)
    fn = _rollout_nb if _accel.numba_enabled() else _rollout_np
    end, collide, mc = fn(blocked, clearance, gx, gy, th, vs, ws, float(dt), int(steps))
    c, s = math.cos(oth), math.sin(oth)
    wx = ox + (c * end[:, 0] - s * end[:, 1]) * res
    wy = oy + (s * end[:, 0] + c * end[:, 1]) * res
    return np.stack([wx, wy, end[:, 2] + oth], axis=1), collide, mc

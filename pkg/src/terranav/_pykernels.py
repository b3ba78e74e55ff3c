"""Pure-Python/numpy implementation of the hot kernels.

Mirrors ``_ckernels.pyx`` call for call; used when the compiled extension is
unavailable or when ``TERRANAV_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np

RAY_HIT = 0
RAY_MISS = 1
RAY_BAD_ORIGIN = 2
RAY_OUTSIDE = 3

TRACK_OK = 0
TRACK_SINGULAR = 1
TRACK_OUT_OF_BOUNDS = 2


def _patch_height(elev, i, j, t, r):
    return (elev[j, i] * (1.0 - t) * (1.0 - r)
            + elev[j, i + 1] * t * (1.0 - r)
            + elev[j + 1, i] * (1.0 - t) * r
            + elev[j + 1, i + 1] * t * r)


def _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, s):
    # height of the ray above patch (i, j) at parameter s
    t = (ox + s * dx - x0) / cell - i
    r = (oy + s * dy - y0) / cell - j
    return oz + s * dz - _patch_height(elev, i, j, t, r)


def _cast_one(elev, x0, y0, cell, zmin, ox, oy, oz, dx, dy, dz, tol):
    ny, nx = elev.shape
    xmax = x0 + (nx - 1) * cell
    ymax = y0 + (ny - 1) * cell
    if not (x0 <= ox <= xmax and y0 <= oy <= ymax):
        return math.nan, RAY_OUTSIDE

    i = min(max(int(math.floor((ox - x0) / cell)), 0), nx - 2)
    j = min(max(int(math.floor((oy - y0) / cell)), 0), ny - 2)
    if _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, 0.0) <= 0.0:
        return math.nan, RAY_BAD_ORIGIN

    s_end = math.inf
    if dz < 0.0:
        # pad past the lowest node so rays landing exactly on it still bracket
        s_end = (oz - zmin) / -dz + tol
    if dx > 0.0:
        s_end = min(s_end, (xmax - ox) / dx)
        step_i, t_max_x, t_delta_x = 1, (x0 + (i + 1) * cell - ox) / dx, cell / dx
    elif dx < 0.0:
        s_end = min(s_end, (x0 - ox) / dx)
        step_i, t_max_x, t_delta_x = -1, (x0 + i * cell - ox) / dx, -cell / dx
    else:
        step_i, t_max_x, t_delta_x = 0, math.inf, math.inf
    if dy > 0.0:
        s_end = min(s_end, (ymax - oy) / dy)
        step_j, t_max_y, t_delta_y = 1, (y0 + (j + 1) * cell - oy) / dy, cell / dy
    elif dy < 0.0:
        s_end = min(s_end, (y0 - oy) / dy)
        step_j, t_max_y, t_delta_y = -1, (y0 + j * cell - oy) / dy, -cell / dy
    else:
        step_j, t_max_y, t_delta_y = 0, math.inf, math.inf
    if not math.isfinite(s_end):
        return math.nan, RAY_MISS

    du = dx / cell
    dv = dy / cell
    s_a = 0.0
    while True:
        s_b = min(t_max_x, t_max_y, s_end)
        args = (elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz)
        hi = None
        if _gap(*args, s_b) <= 0.0:
            hi = s_b
        else:
            # the gap is quadratic in s inside a patch; look for a dip below zero
            twist = elev[j, i] - elev[j, i + 1] - elev[j + 1, i] + elev[j + 1, i + 1]
            a2 = -twist * du * dv
            if a2 > 0.0:
                t0 = (ox - x0) / cell - i
                r0 = (oy - y0) / cell - j
                b1 = (dz - (elev[j, i + 1] - elev[j, i]) * du
                      - (elev[j + 1, i] - elev[j, i]) * dv
                      - twist * (t0 * dv + r0 * du))
                s_star = -b1 / (2.0 * a2)
                if s_a < s_star < s_b and _gap(*args, s_star) <= 0.0:
                    hi = s_star
        if hi is not None:
            lo = s_a
            g_lo = _gap(*args, lo)
            g_hi = _gap(*args, hi)
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                g_mid = _gap(*args, mid)
                if g_mid <= 0.0:
                    hi, g_hi = mid, g_mid
                else:
                    lo, g_lo = mid, g_mid
            return lo + (hi - lo) * g_lo / (g_lo - g_hi), RAY_HIT
        if s_b >= s_end:
            return math.nan, RAY_MISS
        if t_max_x < t_max_y:
            i += step_i
            s_a = t_max_x
            t_max_x += t_delta_x
        else:
            j += step_j
            s_a = t_max_y
            t_max_y += t_delta_y
        if not (0 <= i <= nx - 2 and 0 <= j <= ny - 2):
            return math.nan, RAY_MISS


def cast_rays(elev, x0, y0, cell, origins, dirs, tol):
    """Intersect rays with the bilinear heightfield.

    Returns ``(depth, status)`` arrays; depth is NaN where status != RAY_HIT.
    """
    elev = np.ascontiguousarray(elev, dtype=np.float64)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    depth = np.full(n, np.nan)
    status = np.zeros(n, dtype=np.int32)
    zmin = float(elev.min())
    for k in range(n):
        ox, oy, oz = (float(v) for v in origins[k])
        dx, dy, dz = (float(v) for v in dirs[k])
        depth[k], status[k] = _cast_one(elev, x0, y0, cell, zmin,
                                        ox, oy, oz, dx, dy, dz, tol)
    return depth, status


def _sample_window(img, x, y, radius):
    # bilinear samples of a (2r+1)^2 window centred on (x, y); all taps share
    # one fractional offset, so four shifted slices suffice
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    a = x - ix
    b = y - iy
    k = 2 * radius + 1
    xs = ix - radius
    ys = iy - radius
    p00 = img[ys:ys + k, xs:xs + k]
    p10 = img[ys:ys + k, xs + 1:xs + k + 1]
    p01 = img[ys + 1:ys + k + 1, xs:xs + k]
    p11 = img[ys + 1:ys + k + 1, xs + 1:xs + k + 1]
    return ((1.0 - a) * (1.0 - b) * p00 + a * (1.0 - b) * p10
            + (1.0 - a) * b * p01 + a * b * p11)


def window_fits(shape, x, y, radius, border):
    """True when bilinear window taps at (x, y) stay within ``border`` of the edge."""
    h, w = shape
    if not (math.isfinite(x) and math.isfinite(y)):
        return False
    if x - radius < border or y - radius < border:
        return False
    if x + radius > w - 1 - border or y + radius > h - 1 - border:
        return False
    return True


def _safe_window(img, x, y, radius):
    # right/bottom tap of a window ending exactly on the last valid pixel has
    # zero bilinear weight; pad by one so slicing never runs off the array
    h, w = img.shape
    if math.floor(x) + radius + 1 >= w or math.floor(y) + radius + 1 >= h:
        img = np.pad(img, ((0, 1), (0, 1)), mode="edge")
    return _sample_window(img, x, y, radius)


def track_level(img1, img2, gx, gy, pts, guess, weights, radius,
                max_iters, eps, eig_ratio):
    """Iterated translational Lucas-Kanade for every point at one pyramid level.

    Returns ``(flow, status)``; ``flow`` holds the final displacement.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    flow = np.array(guess, dtype=np.float64).reshape(-1, 2)
    status = np.zeros(pts.shape[0], dtype=np.int32)
    shape = img1.shape
    for k in range(pts.shape[0]):
        x, y = pts[k]
        if not window_fits(shape, x, y, radius, 1):
            status[k] = TRACK_OUT_OF_BOUNDS
            continue
        sx = _safe_window(gx, x, y, radius)
        sy = _safe_window(gy, x, y, radius)
        wx = weights * sx
        wy = weights * sy
        gxx = float(np.sum(wx * sx))
        gxy = float(np.sum(wx * sy))
        gyy = float(np.sum(wy * sy))
        trace = gxx + gyy
        min_eig = 0.5 * trace - math.sqrt(0.25 * (gxx - gyy) ** 2 + gxy * gxy)
        if trace <= 0.0 or min_eig < eig_ratio * trace:
            status[k] = TRACK_SINGULAR
            continue
        det = gxx * gyy - gxy * gxy
        i1 = _safe_window(img1, x, y, radius)
        dxk, dyk = flow[k]
        for _ in range(max_iters):
            if not window_fits(shape, x + dxk, y + dyk, radius, 0):
                status[k] = TRACK_OUT_OF_BOUNDS
                break
            it = _safe_window(img2, x + dxk, y + dyk, radius) - i1
            bx = -float(np.sum(wx * it))
            by = -float(np.sum(wy * it))
            ux = (gyy * bx - gxy * by) / det
            uy = (gxx * by - gxy * bx) / det
            dxk += ux
            dyk += uy
            if ux * ux + uy * uy < eps * eps:
                break
        if status[k] == TRACK_OK and not window_fits(shape, x + dxk, y + dyk, radius, 0):
            status[k] = TRACK_OUT_OF_BOUNDS
        flow[k] = dxk, dyk
    return flow, status

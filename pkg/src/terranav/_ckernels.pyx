# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: heightfield ray casting and per-level LK tracking.

Semantics match ``_pykernels`` exactly; only the loop mechanics differ.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY, NAN, isfinite

cnp.import_array()

cdef enum:
    RAY_HIT = 0
    RAY_MISS = 1
    RAY_BAD_ORIGIN = 2
    RAY_OUTSIDE = 3

cdef enum:
    TRACK_OK = 0
    TRACK_SINGULAR = 1
    TRACK_OUT_OF_BOUNDS = 2


cdef inline double _gap(const double[:, ::1] elev, Py_ssize_t i, Py_ssize_t j,
                        double x0, double y0, double cell,
                        double ox, double oy, double oz,
                        double dx, double dy, double dz, double s) nogil:
    cdef double t = (ox + s * dx - x0) / cell - i
    cdef double r = (oy + s * dy - y0) / cell - j
    cdef double h = (elev[j, i] * (1.0 - t) * (1.0 - r)
                     + elev[j, i + 1] * t * (1.0 - r)
                     + elev[j + 1, i] * (1.0 - t) * r
                     + elev[j + 1, i + 1] * t * r)
    return oz + s * dz - h


cdef int _cast_one(const double[:, ::1] elev, double x0, double y0, double cell,
                   double zmin, double ox, double oy, double oz,
                   double dx, double dy, double dz, double tol,
                   double* depth) nogil:
    cdef Py_ssize_t ny = elev.shape[0]
    cdef Py_ssize_t nx = elev.shape[1]
    cdef double xmax = x0 + (nx - 1) * cell
    cdef double ymax = y0 + (ny - 1) * cell
    cdef Py_ssize_t i, j, step_i, step_j
    cdef double s_end, t_max_x, t_max_y, t_delta_x, t_delta_y
    cdef double du, dv, s_a, s_b, hi, lo, g_lo, g_hi, mid, g_mid
    cdef double twist, a2, b1, t0, r0, s_star
    cdef bint found

    if not (x0 <= ox <= xmax and y0 <= oy <= ymax):
        return RAY_OUTSIDE
    i = <Py_ssize_t>floor((ox - x0) / cell)
    j = <Py_ssize_t>floor((oy - y0) / cell)
    i = min(max(i, 0), nx - 2)
    j = min(max(j, 0), ny - 2)
    if _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, 0.0) <= 0.0:
        return RAY_BAD_ORIGIN

    s_end = INFINITY
    if dz < 0.0:
        # pad past the lowest node so rays landing exactly on it still bracket
        s_end = (oz - zmin) / -dz + tol
    if dx > 0.0:
        s_end = min(s_end, (xmax - ox) / dx)
        step_i = 1
        t_max_x = (x0 + (i + 1) * cell - ox) / dx
        t_delta_x = cell / dx
    elif dx < 0.0:
        s_end = min(s_end, (x0 - ox) / dx)
        step_i = -1
        t_max_x = (x0 + i * cell - ox) / dx
        t_delta_x = -cell / dx
    else:
        step_i = 0
        t_max_x = INFINITY
        t_delta_x = INFINITY
    if dy > 0.0:
        s_end = min(s_end, (ymax - oy) / dy)
        step_j = 1
        t_max_y = (y0 + (j + 1) * cell - oy) / dy
        t_delta_y = cell / dy
    elif dy < 0.0:
        s_end = min(s_end, (y0 - oy) / dy)
        step_j = -1
        t_max_y = (y0 + j * cell - oy) / dy
        t_delta_y = -cell / dy
    else:
        step_j = 0
        t_max_y = INFINITY
        t_delta_y = INFINITY
    if not isfinite(s_end):
        return RAY_MISS

    du = dx / cell
    dv = dy / cell
    s_a = 0.0
    while True:
        s_b = min(min(t_max_x, t_max_y), s_end)
        found = False
        if _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, s_b) <= 0.0:
            hi = s_b
            found = True
        else:
            twist = elev[j, i] - elev[j, i + 1] - elev[j + 1, i] + elev[j + 1, i + 1]
            a2 = -twist * du * dv
            if a2 > 0.0:
                t0 = (ox - x0) / cell - i
                r0 = (oy - y0) / cell - j
                b1 = (dz - (elev[j, i + 1] - elev[j, i]) * du
                      - (elev[j + 1, i] - elev[j, i]) * dv
                      - twist * (t0 * dv + r0 * du))
                s_star = -b1 / (2.0 * a2)
                if s_a < s_star < s_b and _gap(elev, i, j, x0, y0, cell, ox, oy, oz,
                                               dx, dy, dz, s_star) <= 0.0:
                    hi = s_star
                    found = True
        if found:
            lo = s_a
            g_lo = _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, lo)
            g_hi = _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, hi)
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                g_mid = _gap(elev, i, j, x0, y0, cell, ox, oy, oz, dx, dy, dz, mid)
                if g_mid <= 0.0:
                    hi = mid
                    g_hi = g_mid
                else:
                    lo = mid
                    g_lo = g_mid
            depth[0] = lo + (hi - lo) * g_lo / (g_lo - g_hi)
            return RAY_HIT
        if s_b >= s_end:
            return RAY_MISS
        if t_max_x < t_max_y:
            i += step_i
            s_a = t_max_x
            t_max_x += t_delta_x
        else:
            j += step_j
            s_a = t_max_y
            t_max_y += t_delta_y
        if i < 0 or i > nx - 2 or j < 0 or j > ny - 2:
            return RAY_MISS


def cast_rays(elev, double x0, double y0, double cell, origins, dirs, double tol):
    """Intersect rays with the bilinear heightfield.

    Returns ``(depth, status)`` arrays; depth is NaN where status != RAY_HIT.
    """
    cdef const double[:, ::1] e = np.ascontiguousarray(elev, dtype=np.float64)
    cdef const double[:, ::1] o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    cdef Py_ssize_t n = o.shape[0]
    depth_arr = np.full(n, np.nan)
    status_arr = np.zeros(n, dtype=np.int32)
    cdef double[::1] depth = depth_arr
    cdef int[::1] status = status_arr
    cdef double zmin = float(np.min(elev))
    cdef Py_ssize_t k
    with nogil:
        for k in range(n):
            status[k] = _cast_one(e, x0, y0, cell, zmin, o[k, 0], o[k, 1], o[k, 2],
                                  d[k, 0], d[k, 1], d[k, 2], tol, &depth[k])
    return depth_arr, status_arr


cdef inline bint _window_fits(Py_ssize_t h, Py_ssize_t w, double x, double y,
                              int radius, int border) nogil:
    if not (isfinite(x) and isfinite(y)):
        return False
    if x - radius < border or y - radius < border:
        return False
    if x + radius > w - 1 - border or y + radius > h - 1 - border:
        return False
    return True


cdef inline double _bilinear(const double[:, ::1] img, Py_ssize_t ix, Py_ssize_t iy,
                             double a, double b) nogil:
    # taps with zero weight may sit one past the last row/column
    cdef Py_ssize_t h = img.shape[0]
    cdef Py_ssize_t w = img.shape[1]
    cdef Py_ssize_t ix1 = ix + 1 if ix + 1 < w else ix
    cdef Py_ssize_t iy1 = iy + 1 if iy + 1 < h else iy
    return ((1.0 - a) * (1.0 - b) * img[iy, ix] + a * (1.0 - b) * img[iy, ix1]
            + (1.0 - a) * b * img[iy1, ix] + a * b * img[iy1, ix1])


def track_level(img1, img2, gx, gy, pts, guess, weights, int radius,
                int max_iters, double eps, double eig_ratio):
    """Iterated translational Lucas-Kanade for every point at one pyramid level.

    Returns ``(flow, status)``; ``flow`` holds the final displacement.
    """
    cdef const double[:, ::1] i1 = np.ascontiguousarray(img1, dtype=np.float64)
    cdef const double[:, ::1] i2 = np.ascontiguousarray(img2, dtype=np.float64)
    cdef const double[:, ::1] g_x = np.ascontiguousarray(gx, dtype=np.float64)
    cdef const double[:, ::1] g_y = np.ascontiguousarray(gy, dtype=np.float64)
    cdef const double[:, ::1] wts = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const double[:, ::1] p = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    flow_arr = np.array(guess, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] flow = flow_arr
    cdef Py_ssize_t n = p.shape[0]
    status_arr = np.zeros(n, dtype=np.int32)
    cdef int[::1] status = status_arr
    cdef Py_ssize_t h = i1.shape[0]
    cdef Py_ssize_t w = i1.shape[1]
    cdef int kw = 2 * radius + 1
    sx_arr = np.empty((kw, kw))
    sy_arr = np.empty((kw, kw))
    si_arr = np.empty((kw, kw))
    cdef double[:, ::1] sx = sx_arr
    cdef double[:, ::1] sy = sy_arr
    cdef double[:, ::1] si = si_arr
    cdef Py_ssize_t k, r, c, ix, iy, jx, jy
    cdef int it_count
    cdef double x, y, a, b, gxx, gxy, gyy, trace, min_eig, det
    cdef double dxk, dyk, bx, by, ux, uy, wt, diff, qx, qy, a2, b2

    with nogil:
        for k in range(n):
            x = p[k, 0]
            y = p[k, 1]
            if not _window_fits(h, w, x, y, radius, 1):
                status[k] = TRACK_OUT_OF_BOUNDS
                continue
            ix = <Py_ssize_t>floor(x)
            iy = <Py_ssize_t>floor(y)
            a = x - ix
            b = y - iy
            gxx = 0.0
            gxy = 0.0
            gyy = 0.0
            for r in range(kw):
                for c in range(kw):
                    jx = ix - radius + c
                    jy = iy - radius + r
                    sx[r, c] = _bilinear(g_x, jx, jy, a, b)
                    sy[r, c] = _bilinear(g_y, jx, jy, a, b)
                    si[r, c] = _bilinear(i1, jx, jy, a, b)
                    wt = wts[r, c]
                    gxx += wt * sx[r, c] * sx[r, c]
                    gxy += wt * sx[r, c] * sy[r, c]
                    gyy += wt * sy[r, c] * sy[r, c]
            trace = gxx + gyy
            min_eig = 0.5 * trace - sqrt(0.25 * (gxx - gyy) * (gxx - gyy) + gxy * gxy)
            if trace <= 0.0 or min_eig < eig_ratio * trace:
                status[k] = TRACK_SINGULAR
                continue
            det = gxx * gyy - gxy * gxy
            dxk = flow[k, 0]
            dyk = flow[k, 1]
            for it_count in range(max_iters):
                qx = x + dxk
                qy = y + dyk
                if not _window_fits(h, w, qx, qy, radius, 0):
                    status[k] = TRACK_OUT_OF_BOUNDS
                    break
                ix = <Py_ssize_t>floor(qx)
                iy = <Py_ssize_t>floor(qy)
                a2 = qx - ix
                b2 = qy - iy
                bx = 0.0
                by = 0.0
                for r in range(kw):
                    for c in range(kw):
                        diff = _bilinear(i2, ix - radius + c, iy - radius + r, a2, b2) - si[r, c]
                        wt = wts[r, c]
                        bx -= wt * sx[r, c] * diff
                        by -= wt * sy[r, c] * diff
                ux = (gyy * bx - gxy * by) / det
                uy = (gxx * by - gxy * bx) / det
                dxk += ux
                dyk += uy
                if ux * ux + uy * uy < eps * eps:
                    break
            if status[k] == TRACK_OK and not _window_fits(h, w, x + dxk, y + dyk, radius, 0):
                status[k] = TRACK_OUT_OF_BOUNDS
            flow[k, 0] = dxk
            flow[k, 1] = dyk
    return flow_arr, status_arr

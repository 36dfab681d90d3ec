# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled scoring kernels; see ``_kernels_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _separated_on(const double[:, ::1] a, const double[:, ::1] b, double nx, double ny) nogil:
    cdef double amin = 1e300, amax = -1e300, bmin = 1e300, bmax = -1e300, p
    cdef int i
    for i in range(4):
        p = a[i, 0] * nx + a[i, 1] * ny
        if p < amin:
            amin = p
        if p > amax:
            amax = p
        p = b[i, 0] * nx + b[i, 1] * ny
        if p < bmin:
            bmin = p
        if p > bmax:
            bmax = p
    return amax <= bmin or bmax <= amin


cdef inline bint _overlap(const double[:, ::1] a, const double[:, ::1] b) nogil:
    cdef int k
    cdef double ex, ey
    for k in range(2):
        ex = a[k + 1, 0] - a[k, 0]
        ey = a[k + 1, 1] - a[k, 1]
        if _separated_on(a, b, -ey, ex):
            return False
        ex = b[k + 1, 0] - b[k, 0]
        ey = b[k + 1, 1] - b[k, 1]
        if _separated_on(a, b, -ey, ex):
            return False
    return True


def first_overlap(ego, obstacles):
    cdef const double[:, :, ::1] e = np.ascontiguousarray(ego, dtype=np.float64)
    cdef const double[:, :, :, ::1] o = np.ascontiguousarray(obstacles, dtype=np.float64)
    cdef Py_ssize_t T = o.shape[0], M = o.shape[1], t, m
    cdef Py_ssize_t found = -1
    with nogil:
        for t in range(T):
            for m in range(M):
                if _overlap(e[t], o[t, m]):
                    found = t
                    break
            if found >= 0:
                break
    return found


def points_in_polygon(points, polygon):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] poly = np.ascontiguousarray(polygon, dtype=np.float64)
    cdef Py_ssize_t P = p.shape[0], V = poly.shape[0], i, j, k
    out = np.zeros(P, dtype=np.uint8)
    cdef cnp.uint8_t[::1] res = out
    cdef double x, y, x0, y0, x1, y1, xc
    cdef int inside
    with nogil:
        for i in range(P):
            x = p[i, 0]
            y = p[i, 1]
            inside = 0
            for j in range(V):
                k = j + 1 if j + 1 < V else 0
                x0 = poly[j, 0]
                y0 = poly[j, 1]
                x1 = poly[k, 0]
                y1 = poly[k, 1]
                if (y0 > y) != (y1 > y):
                    xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
                    if x < xc:
                        inside ^= 1
            res[i] = inside
    return out


def project_to_polyline(points, line):
    cdef const double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] ln = np.ascontiguousarray(line, dtype=np.float64)
    cdef Py_ssize_t P = p.shape[0], K = ln.shape[0], i, j, best_j
    dist_a = np.empty(P, dtype=np.float64)
    idx_a = np.empty(P, dtype=np.int64)
    s_a = np.empty(P, dtype=np.float64)
    cdef double[::1] dist = dist_a
    cdef cnp.int64_t[::1] idx = idx_a
    cdef double[::1] s_out = s_a
    cdef double ax, ay, bx, by, abx, aby, l2, t, cx, cy, d2, best, cum, best_s, seg
    with nogil:
        for i in range(P):
            best = 1e300
            best_j = 0
            best_s = 0.0
            cum = 0.0
            for j in range(K - 1):
                ax = ln[j, 0]
                ay = ln[j, 1]
                bx = ln[j + 1, 0]
                by = ln[j + 1, 1]
                abx = bx - ax
                aby = by - ay
                l2 = abx * abx + aby * aby
                seg = sqrt(l2)
                if l2 > 0:
                    t = ((p[i, 0] - ax) * abx + (p[i, 1] - ay) * aby) / l2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                cx = ax + t * abx - p[i, 0]
                cy = ay + t * aby - p[i, 1]
                d2 = cx * cx + cy * cy
                if d2 < best:
                    best = d2
                    best_j = j
                    best_s = cum + t * seg
                cum += seg
            dist[i] = sqrt(best)
            idx[i] = best_j
            s_out[i] = best_s
    return dist_a, idx_a, s_a

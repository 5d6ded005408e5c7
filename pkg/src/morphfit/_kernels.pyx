# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled point-to-triangle and BVH nearest-point kernels.

Arithmetic mirrors ``_kernels_py`` term by term so both backends agree to the
last few ulps.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

ctypedef cnp.int64_t idx_t

DEF STACK_SIZE = 256
cdef double DEGEN_EPS = 1e-20

BACKEND = "cython"


cdef inline double _dot(double ax, double ay, double az, double bx, double by, double bz) nogil:
    return ax * bx + ay * by + az * bz


cdef inline double _segment(const double* p, const double* a, const double* b, double* out) nogil:
    cdef double dx = b[0] - a[0], dy = b[1] - a[1], dz = b[2] - a[2]
    cdef double dd = _dot(dx, dy, dz, dx, dy, dz)
    cdef double t = 0.0
    if dd > 0.0:
        t = _dot(p[0] - a[0], p[1] - a[1], p[2] - a[2], dx, dy, dz) / dd
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
    out[0] = a[0] + t * dx
    out[1] = a[1] + t * dy
    out[2] = a[2] + t * dz
    dx = p[0] - out[0]
    dy = p[1] - out[1]
    dz = p[2] - out[2]
    return _dot(dx, dy, dz, dx, dy, dz)


cdef double _closest(const double* p, const double* a, const double* b, const double* c,
                     double* out) nogil:
    """Closest point on triangle abc to p; returns squared distance."""
    cdef double abx = b[0] - a[0], aby = b[1] - a[1], abz = b[2] - a[2]
    cdef double acx = c[0] - a[0], acy = c[1] - a[1], acz = c[2] - a[2]
    cdef double nx = aby * acz - abz * acy
    cdef double ny = abz * acx - abx * acz
    cdef double nz = abx * acy - aby * acx
    cdef double nn = _dot(nx, ny, nz, nx, ny, nz)
    cdef double ab2 = _dot(abx, aby, abz, abx, aby, abz)
    cdef double ac2 = _dot(acx, acy, acz, acx, acy, acz)
    cdef double tmp[3]
    cdef double best, d
    cdef double d1, d2, d3, d4, d5, d6, va, vb, vc, v, w, denom
    cdef double dx, dy, dz

    if nn <= DEGEN_EPS * ab2 * ac2:
        best = _segment(p, a, b, out)
        d = _segment(p, b, c, tmp)
        if d < best:
            best = d
            out[0] = tmp[0]; out[1] = tmp[1]; out[2] = tmp[2]
        d = _segment(p, c, a, tmp)
        if d < best:
            best = d
            out[0] = tmp[0]; out[1] = tmp[1]; out[2] = tmp[2]
        return best

    d1 = _dot(abx, aby, abz, p[0] - a[0], p[1] - a[1], p[2] - a[2])
    d2 = _dot(acx, acy, acz, p[0] - a[0], p[1] - a[1], p[2] - a[2])
    d3 = _dot(abx, aby, abz, p[0] - b[0], p[1] - b[1], p[2] - b[2])
    d4 = _dot(acx, acy, acz, p[0] - b[0], p[1] - b[1], p[2] - b[2])
    d5 = _dot(abx, aby, abz, p[0] - c[0], p[1] - c[1], p[2] - c[2])
    d6 = _dot(acx, acy, acz, p[0] - c[0], p[1] - c[1], p[2] - c[2])
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    if d1 <= 0.0 and d2 <= 0.0:
        out[0] = a[0]; out[1] = a[1]; out[2] = a[2]
    elif d3 >= 0.0 and d4 <= d3:
        out[0] = b[0]; out[1] = b[1]; out[2] = b[2]
    elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        out[0] = a[0] + v * abx; out[1] = a[1] + v * aby; out[2] = a[2] + v * abz
    elif d6 >= 0.0 and d5 <= d6:
        out[0] = c[0]; out[1] = c[1]; out[2] = c[2]
    elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        out[0] = a[0] + w * acx; out[1] = a[1] + w * acy; out[2] = a[2] + w * acz
    elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        out[0] = b[0] + w * (c[0] - b[0])
        out[1] = b[1] + w * (c[1] - b[1])
        out[2] = b[2] + w * (c[2] - b[2])
    else:
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        out[0] = a[0] + abx * v + acx * w
        out[1] = a[1] + aby * v + acy * w
        out[2] = a[2] + abz * v + acz * w
    dx = p[0] - out[0]
    dy = p[1] - out[1]
    dz = p[2] - out[2]
    return _dot(dx, dy, dz, dx, dy, dz)


cdef inline double _box_d2(const double* p, const double* lo, const double* hi) nogil:
    cdef double s = 0.0, e
    cdef int k
    for k in range(3):
        if p[k] < lo[k]:
            e = lo[k] - p[k]
            s += e * e
        elif p[k] > hi[k]:
            e = p[k] - hi[k]
            s += e * e
    return s


def closest_point_triangle(p, a, b, c):
    """Return ``(closest_point, squared_distance)`` for one query and one triangle."""
    cdef double pp[3], aa[3], bb[3], cc[3], out[3]
    cdef int k
    for k in range(3):
        pp[k] = p[k]; aa[k] = a[k]; bb[k] = b[k]; cc[k] = c[k]
    d2 = _closest(pp, aa, bb, cc, out)
    return np.array([out[0], out[1], out[2]]), d2


def query(const double[:, ::1] queries, const double[:, ::1] verts, const idx_t[:, ::1] faces,
          const double[:, ::1] bmin, const double[:, ::1] bmax, const idx_t[::1] left,
          const idx_t[::1] right, const idx_t[::1] start, const idx_t[::1] count,
          const idx_t[::1] order):
    """Nearest surface point for every query via BVH traversal.

    Ties on distance resolve to the lowest face index.
    """
    cdef Py_ssize_t n = queries.shape[0]
    out_pts = np.empty((n, 3))
    out_d2 = np.empty(n)
    out_face = np.empty(n, dtype=np.int64)
    cdef double[:, ::1] pts = out_pts
    cdef double[::1] dist2 = out_d2
    cdef idx_t[::1] fidx = out_face
    cdef idx_t stack[STACK_SIZE]
    cdef idx_t sp, node, t, f, lo_child, hi_child
    cdef double best, d, dl, dr
    cdef double cand[3]
    cdef double bp[3]
    cdef idx_t best_f
    cdef Py_ssize_t i

    with nogil:
        for i in range(n):
            best = INFINITY
            best_f = -1
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if _box_d2(&queries[i, 0], &bmin[node, 0], &bmax[node, 0]) > best:
                    continue
                if left[node] < 0:
                    for t in range(start[node], start[node] + count[node]):
                        f = order[t]
                        d = _closest(&queries[i, 0], &verts[faces[f, 0], 0], &verts[faces[f, 1], 0],
                                     &verts[faces[f, 2], 0], cand)
                        if d < best or (d == best and f < best_f):
                            best = d
                            best_f = f
                            bp[0] = cand[0]; bp[1] = cand[1]; bp[2] = cand[2]
                else:
                    dl = _box_d2(&queries[i, 0], &bmin[left[node], 0], &bmax[left[node], 0])
                    dr = _box_d2(&queries[i, 0], &bmin[right[node], 0], &bmax[right[node], 0])
                    if dl <= dr:
                        lo_child = left[node]; hi_child = right[node]
                    else:
                        lo_child = right[node]; hi_child = left[node]
                    if sp + 2 > STACK_SIZE:
                        break
                    stack[sp] = hi_child
                    stack[sp + 1] = lo_child
                    sp += 2
            pts[i, 0] = bp[0]; pts[i, 1] = bp[1]; pts[i, 2] = bp[2]
            dist2[i] = best
            fidx[i] = best_f
    return out_pts, out_d2, out_face

"""Pure-numpy fallback for the nearest-point kernels.

``query`` prunes with the BVH leaf boxes and evaluates the surviving pairs in
vectorised chunks; distances and tie-breaking (lowest face index) match the
compiled traversal.
``traverse`` is a literal Python BVH walk used for debugging and tests.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"
DEGEN_EPS = 1e-20
_CHUNK = 1 << 18  # query-triangle pairs per vectorised block


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _segment(p, a, b):
    d = b - a
    dd = _dot(d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dd > 0.0, _dot(p - a, d) / np.where(dd > 0.0, dd, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    q = a + t[..., None] * d
    e = p - q
    return q, _dot(e, e)


def _closest(p, a, b, c):
    """Vectorised closest point on triangles; all inputs broadcast to (..., 3)."""
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab = b - a
    ac = c - a
    n = np.stack([ab[..., 1] * ac[..., 2] - ab[..., 2] * ac[..., 1],
                  ab[..., 2] * ac[..., 0] - ab[..., 0] * ac[..., 2],
                  ab[..., 0] * ac[..., 1] - ab[..., 1] * ac[..., 0]], axis=-1)
    degen = _dot(n, n) <= DEGEN_EPS * _dot(ab, ab) * _dot(ac, ac)

    ap = p - a
    bp = p - b
    cp = p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    r_a = (d1 <= 0.0) & (d2 <= 0.0)
    r_b = ~r_a & (d3 >= 0.0) & (d4 <= d3)
    taken = r_a | r_b
    r_ab = ~taken & (vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0)
    taken |= r_ab
    r_c = ~taken & (d6 >= 0.0) & (d5 <= d6)
    taken |= r_c
    r_ac = ~taken & (vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0)
    taken |= r_ac
    r_bc = ~taken & (va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0)
    taken |= r_bc
    inside = ~taken

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom

    q = np.empty_like(p)
    q[r_a] = a[r_a]
    q[r_b] = b[r_b]
    q[r_ab] = a[r_ab] + v_ab[r_ab, None] * ab[r_ab]
    q[r_c] = c[r_c]
    q[r_ac] = a[r_ac] + w_ac[r_ac, None] * ac[r_ac]
    q[r_bc] = b[r_bc] + w_bc[r_bc, None] * (c[r_bc] - b[r_bc])
    q[inside] = a[inside] + ab[inside] * v_in[inside, None] + ac[inside] * w_in[inside, None]

    if np.any(degen):
        pd, ad, bd, cd = p[degen], a[degen], b[degen], c[degen]
        best_q, best = _segment(pd, ad, bd)
        for s0, s1 in ((bd, cd), (cd, ad)):
            sq, sd = _segment(pd, s0, s1)
            better = sd < best
            best = np.where(better, sd, best)
            best_q = np.where(better[..., None], sq, best_q)
        q[degen] = best_q
    e = p - q
    return q, _dot(e, e)


def closest_point_triangle(p, a, b, c):
    q, d2 = _closest(*(np.asarray(x, dtype=float)[None] for x in (p, a, b, c)))
    return q[0], float(d2[0])


def _brute(queries, tri):
    n, nf = len(queries), len(tri)
    out_pts = np.empty((n, 3))
    out_d2 = np.empty(n)
    out_face = np.empty(n, dtype=np.int64)
    step = max(1, _CHUNK // max(nf, 1))
    for s in range(0, n, step):
        qs = queries[s:s + step, None, :]
        q, d2 = _closest(qs, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        best = np.argmin(d2, axis=1)  # first minimum, i.e. lowest face index
        rows = np.arange(len(best))
        out_pts[s:s + step] = q[rows, best]
        out_d2[s:s + step] = d2[rows, best]
        out_face[s:s + step] = best
    return out_pts, out_d2, out_face


def query(queries, verts, faces, bmin=None, bmax=None, left=None, right=None,
          start=None, count=None, order=None):
    """Nearest surface point for every query.

    Without BVH arrays every triangle is scanned.  With them, each query keeps
    only the leaves whose box lies within its nearest-vertex distance and the
    surviving (query, triangle) pairs are evaluated in one vectorised pass.
    """
    queries = np.asarray(queries, dtype=float).reshape(-1, 3)
    verts = np.asarray(verts, dtype=float)
    tri = verts[np.asarray(faces)]
    if bmin is None:
        return _brute(queries, tri)

    from scipy.spatial import cKDTree

    leaves = np.flatnonzero(np.asarray(left) < 0)
    lo, hi = bmin[leaves], bmax[leaves]
    used = np.unique(np.asarray(faces).ravel())
    ub, _ = cKDTree(verts[used]).query(queries)
    ub2 = ub * ub * (1.0 + 1e-9) + 1e-300  # slack for rounding in the kd-tree distance
    n = len(queries)
    out_pts = np.empty((n, 3))
    out_d2 = np.full(n, np.inf)
    out_face = np.full(n, -1, dtype=np.int64)
    step = max(1, _CHUNK // (8 * max(len(leaves), 1)))
    for s in range(0, n, step):
        qs = queries[s:s + step]
        e = np.maximum(lo[None] - qs[:, None], 0.0) + np.maximum(qs[:, None] - hi[None], 0.0)
        box = _dot(e, e)
        qi, li = np.nonzero(box <= ub2[s:s + step, None])
        counts = count[leaves[li]]
        rep_q = np.repeat(qi, counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        fi = order[np.repeat(start[leaves[li]], counts) + offs]
        t = tri[fi]
        q, d2 = _closest(qs[rep_q], t[:, 0], t[:, 1], t[:, 2])
        # per query: smallest distance, then lowest face index
        key = np.lexsort((fi, d2, rep_q))
        first = key[np.r_[True, rep_q[key][1:] != rep_q[key][:-1]]]
        rows = s + rep_q[first]
        out_pts[rows] = q[first]
        out_d2[rows] = d2[first]
        out_face[rows] = fi[first]
    return out_pts, out_d2, out_face


def _box_d2(p, lo, hi):
    e = np.maximum(lo - p, 0.0) + np.maximum(p - hi, 0.0)
    return float(e @ e)


def traverse(query_pt, verts, faces, bmin, bmax, left, right, start, count, order, check=True):
    """Single-query BVH walk in plain Python.

    With ``check`` set, asserts that each visited leaf's box distance is a lower
    bound on the distances of the triangles it holds.
    """
    p = np.asarray(query_pt, dtype=float)
    best, best_f, best_q = np.inf, -1, None
    stack = [0]
    while stack:
        node = stack.pop()
        bd = _box_d2(p, bmin[node], bmax[node])
        if bd > best:
            continue
        if left[node] < 0:
            for t in range(start[node], start[node] + count[node]):
                f = int(order[t])
                a, b, c = (verts[i] for i in faces[f])
                q, d = closest_point_triangle(p, a, b, c)
                if check:
                    assert bd <= d * (1 + 1e-12) + 1e-300, "box distance exceeds a contained triangle's"
                if d < best or (d == best and f < best_f):
                    best, best_f, best_q = d, f, q
        else:
            dl = _box_d2(p, bmin[left[node]], bmax[left[node]])
            dr = _box_d2(p, bmin[right[node]], bmax[right[node]])
            near, far = (left[node], right[node]) if dl <= dr else (right[node], left[node])
            stack.extend((far, near))
    return best_q, best, best_f

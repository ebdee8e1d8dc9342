# cython: boundscheck=False, wraparound=False, nonecheck=False, cdivision=True
"""Compiled hot kernels: bilinear field sampling, read-footprint accumulation,
and bipartite edge matching.

The numpy fallback in fallback.py mirrors these routines operation for
operation so both backends produce identical output.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused floating:
    float
    double


def bilinear_forward(floating[:, :, ::1] values, floating[:, ::1] di, floating[:, ::1] dj):
    """Gather-warp `values` by the per-pixel offset field (di, dj).

    out[i, j, c] = bilinear(values[:, :, c], i + di[i, j], j + dj[i, j])
    with read coordinates clamped to the image border.  The output grid is
    the field grid; it may differ from the values grid (used for resizing).
    """
    cdef Py_ssize_t VH = values.shape[0]
    cdef Py_ssize_t VW = values.shape[1]
    cdef Py_ssize_t C = values.shape[2]
    cdef Py_ssize_t H = di.shape[0]
    cdef Py_ssize_t W = di.shape[1]
    cdef Py_ssize_t i, j, c, i0, i1, j0, j1
    cdef floating x, y, wi, wj, w00, w01, w10, w11
    cdef floating one = 1

    if floating is float:
        out_np = np.empty((H, W, C), dtype=np.float32)
    else:
        out_np = np.empty((H, W, C), dtype=np.float64)
    cdef floating[:, :, ::1] out = out_np

    for i in range(H):
        for j in range(W):
            x = i + di[i, j]
            y = j + dj[i, j]
            if x < 0:
                x = 0
            elif x > VH - 1:
                x = VH - 1
            if y < 0:
                y = 0
            elif y > VW - 1:
                y = VW - 1
            i0 = <Py_ssize_t>floor(x)
            if i0 > VH - 2:
                i0 = VH - 2
            if i0 < 0:
                i0 = 0
            j0 = <Py_ssize_t>floor(y)
            if j0 > VW - 2:
                j0 = VW - 2
            if j0 < 0:
                j0 = 0
            i1 = i0 + 1
            if i1 > VH - 1:
                i1 = VH - 1
            j1 = j0 + 1
            if j1 > VW - 1:
                j1 = VW - 1
            wi = x - i0
            wj = y - j0
            w00 = (one - wi) * (one - wj)
            w01 = (one - wi) * wj
            w10 = wi * (one - wj)
            w11 = wi * wj
            for c in range(C):
                out[i, j, c] = (
                    w00 * values[i0, j0, c]
                    + w01 * values[i0, j1, c]
                    + w10 * values[i1, j0, c]
                    + w11 * values[i1, j1, c]
                )
    return out_np


def bilinear_vjp(
    floating[:, :, ::1] values,
    floating[:, ::1] di,
    floating[:, ::1] dj,
    floating[:, :, ::1] upstream,
):
    """Vector-Jacobian product of bilinear_forward.

    Returns (grad_values, grad_di, grad_dj).  Offset gradients are zero
    wherever the raw read coordinate fell outside the image and was clamped.
    The grad_values scatter runs in four corner passes so the float addition
    order matches the numpy fallback exactly.
    """
    cdef Py_ssize_t VH = values.shape[0]
    cdef Py_ssize_t VW = values.shape[1]
    cdef Py_ssize_t C = values.shape[2]
    cdef Py_ssize_t H = di.shape[0]
    cdef Py_ssize_t W = di.shape[1]
    cdef Py_ssize_t i, j, c, i0, i1, j0, j1, ti, tj, corner
    cdef floating x, y, xr, yr, wi, wj, w
    cdef floating one = 1
    cdef floating g, si, sj, dvx, dvy
    cdef bint inside_i, inside_j

    if floating is float:
        dt = np.float32
    else:
        dt = np.float64
    gv_np = np.zeros((VH, VW, C), dtype=dt)
    gdi_np = np.zeros((H, W), dtype=dt)
    gdj_np = np.zeros((H, W), dtype=dt)
    cdef floating[:, :, ::1] gv = gv_np
    cdef floating[:, ::1] gdi = gdi_np
    cdef floating[:, ::1] gdj = gdj_np

    for corner in range(4):
        for i in range(H):
            for j in range(W):
                x = i + di[i, j]
                y = j + dj[i, j]
                if x < 0:
                    x = 0
                elif x > VH - 1:
                    x = VH - 1
                if y < 0:
                    y = 0
                elif y > VW - 1:
                    y = VW - 1
                i0 = <Py_ssize_t>floor(x)
                if i0 > VH - 2:
                    i0 = VH - 2
                if i0 < 0:
                    i0 = 0
                j0 = <Py_ssize_t>floor(y)
                if j0 > VW - 2:
                    j0 = VW - 2
                if j0 < 0:
                    j0 = 0
                i1 = i0 + 1
                if i1 > VH - 1:
                    i1 = VH - 1
                j1 = j0 + 1
                if j1 > VW - 1:
                    j1 = VW - 1
                wi = x - i0
                wj = y - j0
                if corner == 0:
                    ti = i0
                    tj = j0
                    w = (one - wi) * (one - wj)
                elif corner == 1:
                    ti = i0
                    tj = j1
                    w = (one - wi) * wj
                elif corner == 2:
                    ti = i1
                    tj = j0
                    w = wi * (one - wj)
                else:
                    ti = i1
                    tj = j1
                    w = wi * wj
                for c in range(C):
                    gv[ti, tj, c] += w * upstream[i, j, c]

    for i in range(H):
        for j in range(W):
            xr = i + di[i, j]
            yr = j + dj[i, j]
            inside_i = 0 <= xr <= VH - 1
            inside_j = 0 <= yr <= VW - 1
            x = xr
            y = yr
            if x < 0:
                x = 0
            elif x > VH - 1:
                x = VH - 1
            if y < 0:
                y = 0
            elif y > VW - 1:
                y = VW - 1
            i0 = <Py_ssize_t>floor(x)
            if i0 > VH - 2:
                i0 = VH - 2
            if i0 < 0:
                i0 = 0
            j0 = <Py_ssize_t>floor(y)
            if j0 > VW - 2:
                j0 = VW - 2
            if j0 < 0:
                j0 = 0
            i1 = i0 + 1
            if i1 > VH - 1:
                i1 = VH - 1
            j1 = j0 + 1
            if j1 > VW - 1:
                j1 = VW - 1
            wi = x - i0
            wj = y - j0
            si = 0
            sj = 0
            for c in range(C):
                g = upstream[i, j, c]
                dvx = (one - wj) * (values[i1, j0, c] - values[i0, j0, c]) + wj * (
                    values[i1, j1, c] - values[i0, j1, c]
                )
                dvy = (one - wi) * (values[i0, j1, c] - values[i0, j0, c]) + wi * (
                    values[i1, j1, c] - values[i1, j0, c]
                )
                si += g * dvx
                sj += g * dvy
            if inside_i:
                gdi[i, j] = si
            if inside_j:
                gdj[i, j] = sj
    return gv_np, gdi_np, gdj_np


def footprint_accumulate(double[:, ::1] di, double[:, ::1] dj):
    """Sum of bilinear read weights landing on each source pixel.

    A source pixel with (near-)zero accumulated weight is never read by the
    warp.  Accumulation runs in four corner passes so the float addition
    order matches the numpy fallback exactly.
    """
    cdef Py_ssize_t H = di.shape[0]
    cdef Py_ssize_t W = di.shape[1]
    cdef Py_ssize_t i, j, corner
    cdef Py_ssize_t i0, i1, j0, j1, ti, tj
    cdef double x, y, wi, wj, w
    cdef double one = 1

    out_np = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_np

    for corner in range(4):
        for i in range(H):
            for j in range(W):
                x = i + di[i, j]
                y = j + dj[i, j]
                if x < 0:
                    x = 0
                elif x > H - 1:
                    x = H - 1
                if y < 0:
                    y = 0
                elif y > W - 1:
                    y = W - 1
                i0 = <Py_ssize_t>floor(x)
                if i0 > H - 2:
                    i0 = H - 2
                if i0 < 0:
                    i0 = 0
                j0 = <Py_ssize_t>floor(y)
                if j0 > W - 2:
                    j0 = W - 2
                if j0 < 0:
                    j0 = 0
                i1 = i0 + 1
                if i1 > H - 1:
                    i1 = H - 1
                j1 = j0 + 1
                if j1 > W - 1:
                    j1 = W - 1
                wi = x - i0
                wj = y - j0
                if corner == 0:
                    ti = i0
                    tj = j0
                    w = (one - wi) * (one - wj)
                elif corner == 1:
                    ti = i0
                    tj = j1
                    w = (one - wi) * wj
                elif corner == 2:
                    ti = i1
                    tj = j0
                    w = wi * (one - wj)
                else:
                    ti = i1
                    tj = j1
                    w = wi * wj
                out[ti, tj] += w
    return out_np


def greedy_match(
    cnp.int64_t[::1] pairs_p,
    cnp.int64_t[::1] pairs_g,
    Py_ssize_t npred,
    Py_ssize_t ngt,
):
    """Nearest-first one-to-one matching over pre-sorted candidate pairs.

    The caller sorts pairs by (distance, pred index, gt index); the sweep
    takes a pair whenever both endpoints are still free.  Returns partner
    index per side, -1 where unmatched.
    """
    cdef Py_ssize_t E = pairs_p.shape[0]
    cdef Py_ssize_t e, p, g
    mp_np = np.full(npred, -1, dtype=np.int64)
    mg_np = np.full(ngt, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] mp = mp_np
    cdef cnp.int64_t[::1] mg = mg_np
    for e in range(E):
        p = pairs_p[e]
        g = pairs_g[e]
        if mp[p] < 0 and mg[g] < 0:
            mp[p] = g
            mg[g] = p
    return mp_np, mg_np


def augment_match(
    cnp.int64_t[::1] indptr,
    cnp.int64_t[::1] indices,
    Py_ssize_t npred,
    Py_ssize_t ngt,
):
    """Maximum-cardinality bipartite matching (Kuhn augmenting paths).

    Adjacency is CSR over pred nodes with each slice sorted by (distance,
    gt index).  A greedy pass seeds the matching, then unmatched preds
    search for augmenting paths with an iterative DFS.
    """
    cdef Py_ssize_t p, p0, g, q, k, top, t
    cdef cnp.int64_t stamp = 0

    mp_np = np.full(npred, -1, dtype=np.int64)
    mg_np = np.full(ngt, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] mp = mp_np
    cdef cnp.int64_t[::1] mg = mg_np
    cdef cnp.int64_t[::1] visited = np.zeros(ngt, dtype=np.int64)
    cdef cnp.int64_t[::1] stack_p = np.empty(npred + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] stack_k = np.empty(npred + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] stack_g = np.empty(npred + 1, dtype=np.int64)

    for p in range(npred):
        for k in range(indptr[p], indptr[p + 1]):
            g = indices[k]
            if mg[g] < 0:
                mg[g] = p
                mp[p] = g
                break

    for p0 in range(npred):
        if mp[p0] >= 0:
            continue
        stamp += 1
        top = 0
        stack_p[0] = p0
        stack_k[0] = indptr[p0]
        while top >= 0:
            p = stack_p[top]
            k = stack_k[top]
            if k >= indptr[p + 1]:
                top -= 1
                continue
            stack_k[top] = k + 1
            g = indices[k]
            if visited[g] == stamp:
                continue
            visited[g] = stamp
            stack_g[top] = g
            q = mg[g]
            if q < 0:
                for t in range(top, -1, -1):
                    mg[stack_g[t]] = stack_p[t]
                    mp[stack_p[t]] = stack_g[t]
                break
            top += 1
            stack_p[top] = q
            stack_k[top] = indptr[q]
    return mp_np, mg_np

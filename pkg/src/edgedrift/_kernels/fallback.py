"""Pure-numpy fallback for the compiled kernels.

Mirrors _native.pyx operation for operation (same clamping, same float
arithmetic order) so the two backends return identical arrays.
"""

import numpy as np


def _read_coords(di, dj, vh, vw):
    """Clamped bilinear read coordinates and corner weights for a gather warp.

    The output grid is the field grid; reads clamp to the (vh, vw) values grid.
    """
    H, W = di.shape
    dt = di.dtype
    ii = np.arange(H, dtype=dt)[:, None]
    jj = np.arange(W, dtype=dt)[None, :]
    x = np.clip(ii + di, 0, vh - 1)
    y = np.clip(jj + dj, 0, vw - 1)
    i0 = np.clip(np.floor(x).astype(np.intp), 0, max(vh - 2, 0))
    j0 = np.clip(np.floor(y).astype(np.intp), 0, max(vw - 2, 0))
    i1 = np.minimum(i0 + 1, vh - 1)
    j1 = np.minimum(j0 + 1, vw - 1)
    wi = x - i0.astype(dt)
    wj = y - j0.astype(dt)
    return i0, i1, j0, j1, wi, wj


def bilinear_forward(values, di, dj):
    i0, i1, j0, j1, wi, wj = _read_coords(di, dj, values.shape[0], values.shape[1])
    w00 = ((1 - wi) * (1 - wj))[..., None]
    w01 = ((1 - wi) * wj)[..., None]
    w10 = (wi * (1 - wj))[..., None]
    w11 = (wi * wj)[..., None]
    return (
        w00 * values[i0, j0]
        + w01 * values[i0, j1]
        + w10 * values[i1, j0]
        + w11 * values[i1, j1]
    )


def bilinear_vjp(values, di, dj, upstream):
    H, W = di.shape
    vh, vw = values.shape[0], values.shape[1]
    dt = di.dtype
    i0, i1, j0, j1, wi, wj = _read_coords(di, dj, vh, vw)
    w00 = (1 - wi) * (1 - wj)
    w01 = (1 - wi) * wj
    w10 = wi * (1 - wj)
    w11 = wi * wj

    gv = np.zeros_like(values)
    np.add.at(gv, (i0, j0), w00[..., None] * upstream)
    np.add.at(gv, (i0, j1), w01[..., None] * upstream)
    np.add.at(gv, (i1, j0), w10[..., None] * upstream)
    np.add.at(gv, (i1, j1), w11[..., None] * upstream)

    dvx = (1 - wj)[..., None] * (values[i1, j0] - values[i0, j0]) + wj[..., None] * (
        values[i1, j1] - values[i0, j1]
    )
    dvy = (1 - wi)[..., None] * (values[i0, j1] - values[i0, j0]) + wi[..., None] * (
        values[i1, j1] - values[i1, j0]
    )
    si = np.sum(upstream * dvx, axis=-1)
    sj = np.sum(upstream * dvy, axis=-1)

    ii = np.arange(H, dtype=dt)[:, None]
    jj = np.arange(W, dtype=dt)[None, :]
    inside_i = (ii + di >= 0) & (ii + di <= vh - 1)
    inside_j = (jj + dj >= 0) & (jj + dj <= vw - 1)
    gdi = np.where(inside_i, si, dt.type(0))
    gdj = np.where(inside_j, sj, dt.type(0))
    return gv, gdi, gdj


def footprint_accumulate(di, dj):
    H, W = di.shape
    i0, i1, j0, j1, wi, wj = _read_coords(di, dj, H, W)
    out = np.zeros((H, W), dtype=np.float64)
    np.add.at(out, (i0, j0), (1 - wi) * (1 - wj))
    np.add.at(out, (i0, j1), (1 - wi) * wj)
    np.add.at(out, (i1, j0), wi * (1 - wj))
    np.add.at(out, (i1, j1), wi * wj)
    return out


def greedy_match(pairs_p, pairs_g, npred, ngt):
    mp = np.full(npred, -1, dtype=np.int64)
    mg = np.full(ngt, -1, dtype=np.int64)
    for p, g in zip(pairs_p.tolist(), pairs_g.tolist()):
        if mp[p] < 0 and mg[g] < 0:
            mp[p] = g
            mg[g] = p
    return mp, mg


def augment_match(indptr, indices, npred, ngt):
    mp = np.full(npred, -1, dtype=np.int64)
    mg = np.full(ngt, -1, dtype=np.int64)
    indptr = indptr.tolist()
    idx = indices.tolist()

    for p in range(npred):
        for k in range(indptr[p], indptr[p + 1]):
            g = idx[k]
            if mg[g] < 0:
                mg[g] = p
                mp[p] = g
                break

    visited = np.zeros(ngt, dtype=np.int64)
    stack_p = [0] * (npred + 1)
    stack_k = [0] * (npred + 1)
    stack_g = [0] * (npred + 1)
    stamp = 0
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
            g = idx[k]
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
    return mp, mg

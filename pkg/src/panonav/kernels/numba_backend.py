"""Numba-compiled kernels.

The ray caster parallelizes over rays; every prange iteration owns a
disjoint slice of the output and inner reductions run in a fixed order, so
results do not depend on thread count.  The convolution kernels lower each
image to an im2col patch matrix and hand the contraction to np.dot (BLAS),
which beats hand-written scalar loops by a wide margin at these feature-map
sizes; they are serial over the batch with deterministic accumulation order
inside the GEMM.
"""

import numpy as np
from numba import njit, prange

_EPS = 1e-9


@njit(cache=True, parallel=True)
def raycast_depth(origin, dirs, spheres, ground_z, has_ground, far):
    m = dirs.shape[0]
    ns = spheres.shape[0]
    out = np.empty(m, dtype=np.float64)
    ox, oy, oz = origin[0], origin[1], origin[2]
    for i in prange(m):
        dx = dirs[i, 0]
        dy = dirs[i, 1]
        dz = dirs[i, 2]
        best = far
        for s in range(ns):
            cx = spheres[s, 0] - ox
            cy = spheres[s, 1] - oy
            cz = spheres[s, 2] - oz
            b = dx * cx + dy * cy + dz * cz
            c = cx * cx + cy * cy + cz * cz - spheres[s, 3] * spheres[s, 3]
            disc = b * b - c
            if disc >= 0.0:
                sq = np.sqrt(disc)
                t1 = b - sq
                if t1 > _EPS:
                    if t1 < best:
                        best = t1
                elif b + sq > _EPS:
                    best = 0.0
        if has_ground and abs(dz) > _EPS:
            tg = (ground_z - oz) / dz
            if tg > _EPS and tg < best:
                best = tg
        out[i] = best
    return out


@njit(cache=True, parallel=True)
def raycast_scene(origins, frames, dirs_local, spheres, skip, ground_z,
                  has_ground, far):
    """Depth for several viewpoints of one scene in a single call.

    origins (A,3), frames (A,3,3) world-from-body rotations, dirs_local
    (M,3) shared body-frame rays, spheres (S,4), skip (A,) index of the
    sphere to ignore per viewpoint (its own body; -1 for none).
    Returns (A, M).
    """
    a_n = origins.shape[0]
    m = dirs_local.shape[0]
    ns = spheres.shape[0]
    out = np.empty((a_n, m), dtype=np.float64)
    for idx in prange(a_n * m):
        ai = idx // m
        i = idx % m
        lx = dirs_local[i, 0]
        ly = dirs_local[i, 1]
        lz = dirs_local[i, 2]
        dx = frames[ai, 0, 0] * lx + frames[ai, 0, 1] * ly + frames[ai, 0, 2] * lz
        dy = frames[ai, 1, 0] * lx + frames[ai, 1, 1] * ly + frames[ai, 1, 2] * lz
        dz = frames[ai, 2, 0] * lx + frames[ai, 2, 1] * ly + frames[ai, 2, 2] * lz
        ox = origins[ai, 0]
        oy = origins[ai, 1]
        oz = origins[ai, 2]
        best = far
        for s in range(ns):
            if s == skip[ai]:
                continue
            cx = spheres[s, 0] - ox
            cy = spheres[s, 1] - oy
            cz = spheres[s, 2] - oz
            b = dx * cx + dy * cy + dz * cz
            c = cx * cx + cy * cy + cz * cz - spheres[s, 3] * spheres[s, 3]
            disc = b * b - c
            if disc >= 0.0:
                sq = np.sqrt(disc)
                t1 = b - sq
                if t1 > _EPS:
                    if t1 < best:
                        best = t1
                elif b + sq > _EPS:
                    best = 0.0
        if has_ground and abs(dz) > _EPS:
            tg = (ground_z - oz) / dz
            if tg > _EPS and tg < best:
                best = tg
        out[ai, i] = best
    return out


@njit(cache=True)
def _im2col(xp, bi, kh, kw, sh, sw, col):
    c = xp.shape[1]
    ho = (xp.shape[2] - kh) // sh + 1
    wo = (xp.shape[3] - kw) // sw + 1
    r = 0
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                n = 0
                for i in range(ho):
                    ii = i * sh + ki
                    for j in range(wo):
                        col[r, n] = xp[bi, ci, ii, j * sw + kj]
                        n += 1
                r += 1


@njit(cache=True)
def conv2d_forward(xp, w, bias, sh, sw):
    b, c, hp, wp = xp.shape
    o, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    k = c * kh * kw
    wmat = np.ascontiguousarray(w.reshape(o, k))
    out = np.empty((b, o, ho, wo), dtype=xp.dtype)
    col = np.empty((k, ho * wo), dtype=xp.dtype)
    for bi in range(b):
        _im2col(xp, bi, kh, kw, sh, sw, col)
        res = np.dot(wmat, col)
        for oi in range(o):
            n = 0
            for y in range(ho):
                for x in range(wo):
                    out[bi, oi, y, x] = res[oi, n] + bias[oi]
                    n += 1
    return out


@njit(cache=True)
def conv2d_backward_weight(xp, gy, kh, kw, sh, sw):
    b, c = xp.shape[0], xp.shape[1]
    o, ho, wo = gy.shape[1], gy.shape[2], gy.shape[3]
    k = c * kh * kw
    acc = np.zeros((o, k), dtype=gy.dtype)
    col = np.empty((k, ho * wo), dtype=xp.dtype)
    gmat = np.empty((o, ho * wo), dtype=gy.dtype)
    for bi in range(b):
        _im2col(xp, bi, kh, kw, sh, sw, col)
        for oi in range(o):
            n = 0
            for y in range(ho):
                for x in range(wo):
                    gmat[oi, n] = gy[bi, oi, y, x]
                    n += 1
        acc += np.dot(gmat, col.T)
    return acc.reshape(o, c, kh, kw).copy()


@njit(cache=True)
def conv2d_backward_input(w, gy, hp, wp, sh, sw):
    b, o, ho, wo = gy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    k = c * kh * kw
    wmat_t = np.ascontiguousarray(w.reshape(o, k).T)
    gxp = np.zeros((b, c, hp, wp), dtype=gy.dtype)
    gmat = np.empty((o, ho * wo), dtype=gy.dtype)
    for bi in range(b):
        for oi in range(o):
            n = 0
            for y in range(ho):
                for x in range(wo):
                    gmat[oi, n] = gy[bi, oi, y, x]
                    n += 1
        gcol = np.dot(wmat_t, gmat)
        r = 0
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    n = 0
                    for i in range(ho):
                        ii = i * sh + ki
                        for j in range(wo):
                            gxp[bi, ci, ii, j * sw + kj] += gcol[r, n]
                            n += 1
                    r += 1
    return gxp

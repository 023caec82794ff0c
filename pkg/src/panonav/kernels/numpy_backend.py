"""Pure-numpy reference implementations of the hot kernels.

Semantics are defined here; the numba backend must agree to float tolerance
on identical inputs (exact equality is not guaranteed because the reduction
orders differ).  Within either backend results are fully deterministic.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_EPS = 1e-9


def raycast_depth(origin, dirs, spheres, ground_z, has_ground, far):
    """Depth along unit rays from a common origin.

    origin : (3,) ray origin
    dirs : (M, 3) unit directions
    spheres : (S, 4) rows of (cx, cy, cz, radius); S may be 0
    ground_z : height of the horizontal ground plane
    has_ground : whether the ground plane participates
    far : miss sentinel / clamp value

    Returns (M,) depths in [0, far].  A ray starting inside a sphere gets
    depth 0; misses get ``far``.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    m = dirs.shape[0]
    depth = np.full(m, far, dtype=np.float64)

    if spheres is not None and len(spheres):
        sph = np.asarray(spheres, dtype=np.float64)
        oc = sph[:, :3] - np.asarray(origin, dtype=np.float64)  # (S,3)
        b = dirs @ oc.T                                         # (M,S)
        c = np.einsum("sj,sj->s", oc, oc) - sph[:, 3] ** 2      # (S,)
        disc = b * b - c[None, :]
        hit = disc >= 0.0
        s = np.sqrt(np.where(hit, disc, 0.0))
        t1 = b - s
        t2 = b + s
        t = np.where(t1 > _EPS, t1, np.where(t2 > _EPS, 0.0, far))
        t = np.where(hit, t, far)
        depth = np.minimum(depth, t.min(axis=1))

    if has_ground:
        dz = dirs[:, 2]
        oz = float(origin[2])
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (ground_z - oz) / dz
        tg = np.where((np.abs(dz) > _EPS) & (tg > _EPS), tg, far)
        depth = np.minimum(depth, tg)

    return np.minimum(depth, far)


def raycast_scene(origins, frames, dirs_local, spheres, skip, ground_z,
                  has_ground, far):
    """Depth for several viewpoints of one scene in a single call.

    origins (A,3), frames (A,3,3) world-from-body rotations, dirs_local
    (M,3) shared body-frame rays, spheres (S,4), skip (A,) index of the
    sphere to ignore per viewpoint (its own body; -1 for none).
    Returns (A, M).
    """
    origins = np.asarray(origins, dtype=np.float64)
    frames = np.asarray(frames, dtype=np.float64)
    dirs_local = np.asarray(dirs_local, dtype=np.float64)
    a_n = origins.shape[0]
    m = dirs_local.shape[0]
    depth = np.full((a_n, m), far, dtype=np.float64)
    dirs = np.einsum("aij,mj->ami", frames, dirs_local)  # (A,M,3)

    if spheres is not None and len(spheres):
        sph = np.asarray(spheres, dtype=np.float64)
        oc = sph[None, :, :3] - origins[:, None, :]          # (A,S,3)
        b = np.einsum("ami,asi->ams", dirs, oc)              # (A,M,S)
        c = np.einsum("asi,asi->as", oc, oc) - sph[:, 3] ** 2
        disc = b * b - c[:, None, :]
        hit = disc >= 0.0
        s = np.sqrt(np.where(hit, disc, 0.0))
        t1 = b - s
        t2 = b + s
        t = np.where(t1 > _EPS, t1, np.where(t2 > _EPS, 0.0, far))
        t = np.where(hit, t, far)
        own = np.asarray(skip)[:, None, None] == \
            np.arange(sph.shape[0])[None, None, :]
        t = np.where(own, far, t)
        depth = np.minimum(depth, t.min(axis=2))

    if has_ground:
        dz = dirs[:, :, 2]
        oz = origins[:, 2][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = (ground_z - oz) / dz
        tg = np.where((np.abs(dz) > _EPS) & (tg > _EPS), tg, far)
        depth = np.minimum(depth, tg)

    return np.minimum(depth, far)


def conv2d_forward(xp, w, bias, sh, sw):
    """Strided 2-d convolution on an already padded input.

    xp : (B, C, Hp, Wp) padded input
    w : (O, C, kh, kw) filters
    bias : (O,)
    sh, sw : strides

    Returns (B, O, Ho, Wo) with Ho = (Hp - kh)//sh + 1.
    """
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.einsum("bchwij,ocij->bohw", win, w, optimize=True)
    return out + bias[None, :, None, None]


def conv2d_backward_weight(xp, gy, kh, kw, sh, sw):
    """Gradient of conv2d_forward w.r.t. the filters. Returns (O, C, kh, kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.einsum("bchwij,bohw->ocij", win, gy, optimize=True)


def conv2d_backward_input(w, gy, hp, wp, sh, sw):
    """Gradient of conv2d_forward w.r.t. the padded input. Returns (B, C, Hp, Wp)."""
    b, o, ho, wo = gy.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gxp = np.zeros((b, c, hp, wp), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            # each (i, j) tap writes a disjoint strided slice
            gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += np.einsum(
                "bohw,oc->bchw", gy, w[:, :, i, j], optimize=True)
    return gxp

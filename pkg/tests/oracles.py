"""Independent recomputation helpers shared by unit and acceptance tests.

These deliberately avoid the library's own fast paths: the stitch check
ray-casts every panorama bearing directly, and the episode metrics are
re-derived from raw position history with plain numpy.
"""

import numpy as np

import panonav.perception as pc
from panonav.scenario import Scenario


# --------------------------------------------------------------------------
# stitched panorama vs. per-bearing ray casting

def random_sphere_scene(rng, n, keepout=1.5, origin=(0.0, 0.0, 1.5)):
    """Random sphere field kept clear of the sensor position."""
    origin = np.asarray(origin)
    s = np.zeros((n, 4))
    for i in range(n):
        while True:
            c = np.array([*rng.uniform(-8, 8, size=2), rng.uniform(0.3, 3.5)])
            r = rng.uniform(0.3, 1.2)
            if np.linalg.norm(c - origin) > r + keepout:
                break
        s[i, :3] = c
        s[i, 3] = r
    return s


def stitch_agreement(stitched, direct, clamped=None):
    """Compare a stitched panorama against the per-bearing oracle.

    Bilinear resampling is undefined across depth discontinuities (sphere
    silhouettes, the grazing ground band), so the pixelwise bound applies
    only where the oracle's 3x3 neighborhood spans < 5% relative depth;
    border-clamped pixels and the top/bottom two rows are excluded as well.
    An aggregate fraction over all non-boundary pixels keeps the exclusion
    honest.

    Returns (max relative error on smooth pixels,
             fraction of non-boundary pixels within 2%).
    """
    st = np.asarray(stitched)
    dr = np.asarray(direct)
    H, W = dr.shape
    if clamped is None:
        clamped = np.zeros((H, W), dtype=bool)
    body = np.zeros((H, W), dtype=bool)
    body[2:H - 2] = True
    lo = dr.copy()
    hi = dr.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            sh = np.roll(np.roll(dr, dx, axis=1), dy, axis=0)
            lo = np.minimum(lo, sh)
            hi = np.maximum(hi, sh)
    discontinuity = (hi - lo) / np.maximum(lo, 1e-9) > 0.05
    rel = np.abs(st - dr) / dr
    smooth = body & ~discontinuity & ~clamped
    guard = body & ~clamped
    return rel[smooth].max(), float((rel[guard] <= 0.02).mean())


def render_both_ways(origin, R, rig, pano, spheres, ground=True, far=100.0):
    """(stitched, oracle PanoramaFrame) for one pose and scene."""
    views = pc.render_scene_views(np.asarray(origin)[None], np.asarray(R)[None],
                                  rig, spheres, far=far, ground=ground)[0]
    table = pc.get_stitch_table(rig, pano)
    stitched = table.sample(views)
    frame = pc.direct_equirect_render(np.asarray(origin), np.asarray(R), pano,
                                      spheres, far=far, ground=ground)
    return stitched, frame


# --------------------------------------------------------------------------
# episode metrics from raw position history

def brute_force_events(record, dyn):
    """First margin violation per agent, scanned over every recorded step.

    Works directly on the (T+1, A, 3) position history with plain numpy:
    freezing is already baked into the recorded trajectory, so each agent's
    first violating step is well defined without replaying controller state.
    Returns a list of (time, agent, hazard) like EpisodeRecord.events.
    """
    sc = Scenario.from_text(record.scenario_text)
    pos = record.positions
    r_a, margin = dyn.agent_radius, dyn.margin
    pair_off = 2.0 * r_a + margin
    events = {}
    for k in range(1, pos.shape[0]):
        p = pos[k]
        d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        agent_clear = d.min(axis=1) - pair_off
        if sc.n_obstacles:
            do = np.linalg.norm(
                p[:, None, :] - sc.obstacle_centers[None, :, :], axis=-1)
            obst_clear = (do - sc.obstacle_radii[None, :]).min(axis=1) \
                - r_a - margin
        else:
            obst_clear = np.full(p.shape[0], np.inf)
        hit = (agent_clear <= 0.0) | (obst_clear <= 0.0)
        for i in np.where(hit)[0]:
            if i not in events:
                hazard = "agent" if agent_clear[i] <= obst_clear[i] \
                    else "obstacle"
                events[i] = (k * record.dt, int(i), hazard)
    return sorted(events.values())


def brute_force_metrics(records, dyn):
    """SR/CR/MFCT means recomputed from scratch across episode records."""
    srs, crs, mfcts = [], [], []
    for rec in records:
        events = brute_force_events(rec, dyn)
        n = rec.positions.shape[1]
        first = {agent: t for t, agent, _ in reversed(events)}
        srs.append((n - len(first)) / n)
        crs.append(len(first) / rec.duration)
        mfcts.append(np.mean([first.get(i, rec.duration) for i in range(n)]))
    return float(np.mean(srs)), float(np.mean(crs)), float(np.mean(mfcts))

"""Classical decentralized controllers with privileged neighbor state.

Both controllers read exact neighbor positions and velocities inside a
sensing radius, information the learned policy has to infer from depth.
They are stateless pure functions of (observation, goal, config): repeated
calls with identical inputs agree bitwise.  Their cruise speed is an
internal constant, deliberately independent of the scenario's commanded
speed, so sweeping the speed axis leaves their behavior unchanged.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_EPS = 1e-12


@dataclass
class BaselineConfig:
    sensing_radius: float = 24.0
    internal_speed: float = 1.5   # fixed cruise speed, m/s
    a_max: float = 6.0
    agent_radius: float = 0.15
    # potential-field gains; k_att balances the default drag so the
    # free-space attractive command settles at exactly internal_speed
    k_att: float = 0.3
    k_rep: float = 2.0
    d_influence: float = 3.0      # repulsion active inside this clearance
    d_floor: float = 0.05         # caps repulsion for coincident hazards
    # dynamic-window sampling
    n_directions: int = 16
    n_magnitudes: int = 3
    cand_accel: float = 3.0       # largest candidate magnitude, m/s^2
    horizon: float = 1.5          # s
    sim_dt: float = 0.1
    drag: float = 0.3
    w_goal: float = 1.0
    w_clear: float = 4.0
    w_speed: float = 2.0
    clear_saturation: float = 2.0
    k_alt: float = 2.0            # vertical servo shared by all candidates
    k_alt_damp: float = 2.0

    def validate(self):
        if self.n_directions < 1 or self.n_magnitudes < 1:
            raise ConfigError("candidate grid needs at least one entry")
        for name in ("sensing_radius", "k_att", "k_rep", "d_influence",
                     "w_goal", "w_clear", "w_speed", "a_max"):
            if getattr(self, name) < 0:
                raise ConfigError(f"baseline gain {name} must be >= 0")
        return self


@dataclass
class PrivilegedObservation:
    """Exact local state: everything within the sensing radius."""
    p: np.ndarray                 # own position (3,)
    v: np.ndarray                 # own velocity (3,)
    neighbors_rel_p: np.ndarray   # (M, 3) neighbor position - own
    neighbors_rel_v: np.ndarray   # (M, 3) neighbor velocity - own
    obstacle_centers: np.ndarray  # (S, 3)
    obstacle_radii: np.ndarray    # (S,)


def privileged_observation(p_all, v_all, i, obstacle_centers, obstacle_radii,
                           cfg, exclude=None):
    """Build agent i's observation from global state; ``exclude`` masks
    agents that should be invisible (none by default)."""
    p_all = np.asarray(p_all, dtype=float)
    v_all = np.asarray(v_all, dtype=float)
    rel_p = p_all - p_all[i]
    keep = np.linalg.norm(rel_p, axis=1) <= cfg.sensing_radius
    keep[i] = False
    if exclude is not None:
        keep &= ~np.asarray(exclude, dtype=bool)
    oc = np.asarray(obstacle_centers, dtype=float).reshape(-1, 3)
    orr = np.asarray(obstacle_radii, dtype=float).reshape(-1)
    if oc.shape[0]:
        od = np.linalg.norm(oc - p_all[i], axis=1) - orr
        oc, orr = oc[od <= cfg.sensing_radius], orr[od <= cfg.sensing_radius]
    return PrivilegedObservation(
        p=p_all[i].copy(), v=v_all[i].copy(),
        neighbors_rel_p=rel_p[keep],
        neighbors_rel_v=(v_all - v_all[i])[keep],
        obstacle_centers=oc, obstacle_radii=orr)


def _clamp_norm(x, cap):
    n = float(np.linalg.norm(x))
    return x * (cap / n) if n > cap else x


def _goal_velocity(p, goal, speed):
    delta = np.asarray(goal, dtype=float) - p
    dist = float(np.linalg.norm(delta))
    if dist < _EPS:
        return np.zeros(3)
    return delta * (min(speed, dist) / dist)


def _hazards(obs, cfg):
    """(directions away (N,3), surface clearances (N,)) for all hazards."""
    dirs = []
    clear = []
    for rel in obs.neighbors_rel_p:
        d = float(np.linalg.norm(rel))
        dirs.append(-rel / max(d, _EPS))
        clear.append(d - 2.0 * cfg.agent_radius)
    for c, r in zip(obs.obstacle_centers, obs.obstacle_radii):
        rel = c - obs.p
        d = float(np.linalg.norm(rel))
        dirs.append(-rel / max(d, _EPS))
        clear.append(d - r - cfg.agent_radius)
    if not dirs:
        return np.zeros((0, 3)), np.zeros(0)
    return np.asarray(dirs), np.asarray(clear)


def apf_step(obs, goal, cfg):
    """Attractive pull toward the goal plus inverse-square repulsion from
    every hazard inside the influence radius; clamped to a_max."""
    a = cfg.k_att * _goal_velocity(obs.p, goal, cfg.internal_speed)
    dirs, clear = _hazards(obs, cfg)
    d0 = cfg.d_influence
    for away, d in zip(dirs, clear):
        d = max(d, cfg.d_floor)
        if d < d0:
            a = a + cfg.k_rep * (1.0 / d - 1.0 / d0) / (d * d) * away
    return _clamp_norm(a, cfg.a_max)


def dwa_candidates(cfg):
    """(N, 3) horizontal acceleration grid, direction-major then magnitude."""
    out = []
    for k in range(cfg.n_directions):
        th = 2.0 * np.pi * k / cfg.n_directions
        for m in range(1, cfg.n_magnitudes + 1):
            mag = cfg.cand_accel * m / cfg.n_magnitudes
            out.append([mag * np.cos(th), mag * np.sin(th), 0.0])
    return np.asarray(out)


def _score_candidates(cands, obs, goal, cfg):
    """Forward-simulate every candidate with the training integrator (drag,
    no noise, constant command); neighbors advance ballistically, obstacles
    stay put.  Returns (scores (N,), collided (N,) bool)."""
    steps = max(1, int(round(cfg.horizon / cfg.sim_dt)))
    n = len(cands)
    p = np.tile(obs.p, (n, 1))
    v = np.tile(obs.v, (n, 1))
    a_prev = np.zeros((n, 3))
    min_clear = np.full(n, np.inf)
    dt = cfg.sim_dt
    n_p0 = obs.p + obs.neighbors_rel_p
    n_v = obs.v + obs.neighbors_rel_v
    for s in range(1, steps + 1):
        a_new = cands - cfg.drag * v
        p = p + v * dt + 0.5 * a_prev * dt * dt
        v = v + 0.5 * (a_prev + a_new) * dt
        a_prev = a_new
        if n_p0.shape[0]:
            d = np.linalg.norm(n_p0 + n_v * (s * dt) - p[:, None, :],
                               axis=2) - 2.0 * cfg.agent_radius
            min_clear = np.minimum(min_clear, d.min(axis=1))
        if obs.obstacle_centers.shape[0]:
            d = np.linalg.norm(obs.obstacle_centers - p[:, None, :], axis=2) \
                - obs.obstacle_radii - cfg.agent_radius
            min_clear = np.minimum(min_clear, d.min(axis=1))
    end_dist = np.linalg.norm(goal - p, axis=1)
    progress = float(np.linalg.norm(goal - obs.p)) - end_dist
    clear_term = np.minimum(min_clear, cfg.clear_saturation)
    # slow down close to the goal: match speed to the remaining distance
    target = np.minimum(cfg.internal_speed, end_dist)
    speed_term = -np.abs(np.linalg.norm(v, axis=1) - target)
    scores = cfg.w_goal * progress + cfg.w_clear * clear_term \
        + cfg.w_speed * speed_term
    return scores, min_clear <= 0.0


def dwa_step(obs, goal, cfg):
    """Best candidate by score; ties go to the lowest index.  If every
    candidate collides within the horizon, brake as hard as possible."""
    goal = np.asarray(goal, dtype=float)
    cands = dwa_candidates(cfg)
    scores, collided = _score_candidates(cands, obs, goal, cfg)
    if collided.all():
        speed = float(np.linalg.norm(obs.v))
        if speed < _EPS:
            a = np.zeros(3)
        else:
            a = -obs.v / speed * cfg.a_max
    else:
        scores[collided] = -np.inf
        a = cands[int(np.argmax(scores))].copy()
    # common vertical servo keeps candidates comparable in the plane
    a[2] += cfg.k_alt * (goal[2] - obs.p[2]) - cfg.k_alt_damp * obs.v[2]
    return _clamp_norm(a, cfg.a_max)

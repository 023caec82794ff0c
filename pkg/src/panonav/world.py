"""Batched quadrotor world model.

Point-mass second-order dynamics with linear drag and Gaussian acceleration
perturbations, trapezoidal integration with closed-form Jacobians, yaw-aligned
reference frames, goal-directed velocity commands, and clearance/collision
checks.  Positions are world-frame meters, z up, ground plane at z = 0.

Differentiable pieces (dynamics, integration, frame rotations of tensor
operands) are recorded on the autodiff tape; rotation matrices themselves and
command targets are treated as constants.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

GRAVITY = 9.81


@dataclass
class DynamicsConfig:
    dt: float = 0.1               # control period, s
    drag: float = 0.3             # linear drag coefficient, 1/s
    noise_std: float = 0.1        # accel perturbation std, m/s^2
    a_max: float = 6.0            # command norm clamp, m/s^2
    agent_radius: float = 0.15    # collision sphere radius, m
    margin: float = 0.1           # safety margin, m
    k_goal: float = 1.0           # proportional slow-down gain, 1/s
    heading_speed_min: float = 0.2  # m/s; below this the yaw frame holds

    def validate(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("drag", "noise_std", "a_max", "agent_radius", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# frames


def yaw_matrix(psi):
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_aligned_frame(R, prev=None):
    """Rotation whose forward axis is the horizontal projection of R's
    forward axis and whose third axis is world up.

    Falls back to ``prev`` (identity if None) when the forward axis is
    within 1e-6 of vertical.
    """
    fwd = np.asarray(R)[:, 0]
    h = np.hypot(fwd[0], fwd[1])
    if h < 1e-6:
        return np.eye(3) if prev is None else np.array(prev)
    c, s = fwd[0] / h, fwd[1] / h
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def yaw_frames_from_velocity(v, prev, min_speed):
    """Batched heading update: rows of ``prev`` (B,3,3) are replaced by the
    yaw frame of the horizontal velocity direction wherever horizontal speed
    exceeds ``min_speed``; slower rows keep their previous frame."""
    v = np.asarray(v)
    h = np.hypot(v[:, 0], v[:, 1])
    move = h > min_speed
    out = np.array(prev)
    if np.any(move):
        c = v[move, 0] / h[move]
        s = v[move, 1] / h[move]
        frames = np.zeros((move.sum(), 3, 3))
        frames[:, 0, 0] = c
        frames[:, 0, 1] = -s
        frames[:, 1, 0] = s
        frames[:, 1, 1] = c
        frames[:, 2, 2] = 1.0
        out[move] = frames
    return out


def tilt_axis(a_cmd_world):
    """Kinematic body-z axis for a commanded world acceleration: the thrust
    direction that produces it under gravity.  Plain numpy (B,3)."""
    up = np.asarray(a_cmd_world) + np.array([0.0, 0.0, GRAVITY])
    n = np.linalg.norm(up, axis=-1, keepdims=True)
    n = np.maximum(n, 1e-9)
    return up / n


# ---------------------------------------------------------------------------
# commands and dynamics


def goal_velocity_command(p, goal, v_max, k_goal=1.0, R_yaw=None):
    """Speed-clamped velocity command toward the goal.

    World-frame direction goal - p with magnitude min(v_max, k_goal * dist);
    rotated into each agent's yaw frame when ``R_yaw`` (B,3,3) is given.
    Plain numpy; commands are targets, not differentiated.
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    goal = np.atleast_2d(np.asarray(goal, dtype=float))
    delta = goal - p
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    speed = np.minimum(v_max, k_goal * dist)
    cmd = delta * (speed / np.maximum(dist, 1e-12))
    if R_yaw is not None:
        cmd = np.einsum("bji,bj->bi", R_yaw, cmd)  # R^T rows
    return cmd


def clamp_norm(x, max_norm, eps=1e-12):
    """Differentiably scale rows of (B,3) down so each norm <= max_norm."""
    n = ad.norm(x, axis=-1, eps=eps)
    scale = ad.div(float(max_norm), ad.maximum(n, float(max_norm)))
    return ad.mul(x, ad.reshape(scale, (-1, 1)))


def apply_dynamics(a_cmd, v, xi, drag):
    """Actual acceleration a = a_cmd - drag * v + xi (xi held constant)."""
    a_cmd, v = ad._wrap(a_cmd), ad._wrap(v)
    xi = np.asarray(xi, dtype=a_cmd.data.dtype)
    out = a_cmd.data - drag * v.data + xi

    def vjp(g):
        return g, -drag * g

    return ad._record(out, (a_cmd, v), vjp)


def integrate_step(p, v, a0, a1, dt):
    """One trapezoidal step with closed-form Jacobians.

    p' = p + v dt + 0.5 a0 dt^2 ; v' = v + 0.5 (a0 + a1) dt, where a0 is the
    acceleration at the interval start and a1 the newly computed one.
    """
    p, v, a0, a1 = (ad._wrap(t) for t in (p, v, a0, a1))
    half_dt2 = 0.5 * dt * dt
    half_dt = 0.5 * dt
    p_out = ad._record(
        p.data + v.data * dt + half_dt2 * a0.data, (p, v, a0),
        lambda g: (g, g * dt, g * half_dt2))
    v_out = ad._record(
        v.data + half_dt * (a0.data + a1.data), (v, a0, a1),
        lambda g: (g, g * half_dt, g * half_dt))
    return p_out, v_out


def rotate_rows(R, x, transpose=False):
    """Rowwise rotation of a (B,3) tensor by constant matrices (B,3,3).

    transpose=True applies R^T (world -> body)."""
    x = ad._wrap(x)
    Rm = np.asarray(R)
    if transpose:
        Rm = Rm.transpose(0, 2, 1)
    out = np.einsum("bij,bj->bi", Rm, x.data)

    def vjp(g):
        return (np.einsum("bij,bi->bj", Rm, g),)

    return ad._record(out, (x,), vjp)


# ---------------------------------------------------------------------------
# clearances (plain numpy; used by evaluation, metrics, and hazard picking)


def agent_clearances(p, r_a, margin):
    """(A, A) margin-adjusted clearances between agents; +inf on the diagonal."""
    p = np.asarray(p)
    d = np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d - 2.0 * r_a - margin


def obstacle_clearances(p, centers, radii, r_a, margin):
    """(A, S) margin-adjusted clearances from agents to sphere obstacles."""
    p = np.asarray(p)
    centers = np.asarray(centers).reshape(-1, 3)
    if centers.shape[0] == 0:
        return np.full((p.shape[0], 0), np.inf)
    d = np.linalg.norm(p[:, None, :] - centers[None, :, :], axis=-1)
    return d - np.asarray(radii)[None, :] - r_a - margin


def violation_mask(p, centers, radii, r_a, margin):
    """Per-agent flag: any agent-agent or agent-obstacle clearance <= 0 now."""
    ac = agent_clearances(p, r_a, margin)
    mask = (ac <= 0.0).any(axis=1)
    oc = obstacle_clearances(p, centers, radii, r_a, margin)
    if oc.shape[1]:
        mask |= (oc <= 0.0).any(axis=1)
    return mask

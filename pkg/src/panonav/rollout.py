"""Batched differentiable rollouts.

E environments of A agents each roll out jointly for T control steps.  Every
step: render depth observations, preprocess, assemble the body-frame state
vector, run one policy step, clamp and rotate the commanded acceleration,
apply drag/noise dynamics, integrate, and accumulate the six loss terms.
Position/velocity tensors carried across step boundaries pass through a
gradient-attenuation hook.

Observations, yaw frames, command targets, tilt, margin inputs, and hazard
selections are gradient-constants.  ``record_frozen=True`` captures them per
step, and passing the captured list back as ``frozen`` replays them verbatim,
which makes the rollout an exact function of (params, dynamics) for
finite-difference gradient checks.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import perception as pc
from . import policy as pol
from . import world as wd
from .errors import ConfigError, NumericError

# stream tags keep the per-purpose RNG draws independent
_STREAM_XI = 17
_STREAM_OBS = 23


@dataclass
class ObsSettings:
    rig: pc.CameraRig = field(default_factory=pc.CameraRig)
    pano: pc.PanoramaConfig = field(default_factory=pc.PanoramaConfig)
    prep: pc.PreprocessConfig = field(default_factory=pc.PreprocessConfig)
    mode: str = "panorama"           # "panorama" | "forward"
    d_far: float = pc.D_RENDER_MAX
    prune: float = 30.0              # sphere cull radius for rendering, m
    failed: tuple = ()               # failed camera names/indices

    def input_shape(self):
        """(H, W) of the preprocessed network input."""
        k = self.prep.pool
        if self.mode == "panorama":
            return self.pano.height // k, self.pano.width // k
        if self.mode == "forward":
            return self.rig.height // k, self.rig.width // k
        raise ConfigError(f"unknown observation mode {self.mode!r}")


class EnvBatch:
    """Stacked agent state across environments sharing one agent count."""

    def __init__(self, scenarios, dyn):
        counts = {s.n_agents for s in scenarios}
        if len(counts) != 1:
            raise ConfigError("all environments in a batch need the same "
                              "agent count")
        self.A = counts.pop()
        self.E = len(scenarios)
        self.B = self.E * self.A
        self.dyn = dyn
        self.scenarios = scenarios
        self.starts = np.concatenate([s.starts for s in scenarios])
        self.goals = np.concatenate([s.goals for s in scenarios])
        self.v_max = np.concatenate([s.v_max for s in scenarios])
        self.spheres = [
            np.column_stack([s.obstacle_centers, s.obstacle_radii])
            if s.n_obstacles else np.zeros((0, 4))
            for s in scenarios
        ]
        smax = max(s.n_obstacles for s in scenarios)
        self.obst_smax = smax
        if smax:
            self.obst_centers = np.full((self.E, smax, 3), 1e9)
            self.obst_radii = np.zeros((self.E, smax))
            self.obst_valid = np.zeros((self.E, smax), dtype=bool)
            for e, s in enumerate(scenarios):
                n = s.n_obstacles
                self.obst_centers[e, :n] = s.obstacle_centers
                self.obst_radii[e, :n] = s.obstacle_radii
                self.obst_valid[e, :n] = True

    def initial_frames(self):
        """Yaw frames facing each agent's goal."""
        head = self.goals - self.starts
        frames = np.tile(np.eye(3), (self.B, 1, 1))
        return wd.yaw_frames_from_velocity(head, frames, 0.0)

    def min_clearances(self, p_data):
        """(B,) margin-adjusted clearance to the closest hazard per agent."""
        out = np.full(self.B, np.inf)
        P = p_data.reshape(self.E, self.A, 3)
        for e in range(self.E):
            c = np.full(self.A, np.inf)
            if self.A > 1:
                c = wd.agent_clearances(
                    P[e], self.dyn.agent_radius, self.dyn.margin).min(axis=1)
            sph = self.spheres[e]
            if sph.shape[0]:
                oc = wd.obstacle_clearances(
                    P[e], sph[:, :3], sph[:, 3],
                    self.dyn.agent_radius, self.dyn.margin).min(axis=1)
                c = np.minimum(c, oc)
            out[e * self.A:(e + 1) * self.A] = c
        return out

    def violations(self, p_data):
        """(B,) bool: any margin violation at this instant."""
        out = np.zeros(self.B, dtype=bool)
        P = p_data.reshape(self.E, self.A, 3)
        for e in range(self.E):
            out[e * self.A:(e + 1) * self.A] = wd.violation_mask(
                P[e], self.spheres[e][:, :3], self.spheres[e][:, 3],
                self.dyn.agent_radius, self.dyn.margin)
        return out


def render_observations(p, frames, envs, obs, rng=None, dtype=np.float64):
    """(B, h, w) preprocessed depth inputs for the whole batch.

    Each environment is rendered in one scene-level kernel call: the sphere
    set is its obstacles plus every agent body, and each agent's own sphere
    is skipped from its views."""
    E, A, r_a = envs.E, envs.A, envs.dyn.agent_radius
    P = p.reshape(E, A, 3)
    F = frames.reshape(E, A, 3, 3)
    views = []
    for e in range(E):
        static = envs.spheres[e]
        bodies = np.column_stack([P[e], np.full(A, r_a)])
        spheres = np.concatenate([static, bodies])
        skip = static.shape[0] + np.arange(A)
        views.append(pc.render_scene_views(
            P[e], F[e], obs.rig, spheres, skip=skip, far=obs.d_far,
            ground=True, prune=obs.prune))
    images = np.concatenate(views)          # (B, K, H0, W0)
    if obs.failed:
        for f in obs.failed:
            k = pc.CAMERA_NAMES[f] if isinstance(f, str) else int(f)
            images[:, k] = obs.d_far
    if obs.mode == "panorama":
        table = pc.get_stitch_table(obs.rig, obs.pano)
        raw = table.sample_batch(images)
    else:
        raw = images[:, 0]
    return pc.preprocess(raw, obs.prep, rng=rng, dtype=dtype)


def _nearest_neighbor_idx(p_data, E, A):
    """Global row index of each agent's nearest other agent (constant)."""
    P = p_data.reshape(E, A, 3)
    D = np.linalg.norm(P[:, :, None, :] - P[:, None, :, :], axis=-1)
    idx = np.arange(A)
    D[:, idx, idx] = np.inf
    return (np.arange(E)[:, None] * A + D.argmin(axis=2)).ravel()


def _neighbor_terms(p_t, v_t, j_glob, offset):
    """Margin-adjusted distance and approach speed to the selected agent."""
    pb = ad.gather_rows(p_t, j_glob)
    vb = ad.gather_rows(v_t, j_glob)
    dist = ad.norm(ad.sub(pb, p_t), axis=-1)
    return ad.sub(dist, offset), lo.approach_speed(p_t, v_t, pb, vb)


def _nearest_obstacle_select(p_data, envs, r_a, margin):
    """Constant pick of each agent's nearest obstacle.

    Returns (centers (B,3), offsets (B,), mask (B,)); mask zeroes agents in
    environments without obstacles."""
    E, A = envs.E, envs.A
    P = p_data.reshape(E, A, 3)
    D = np.linalg.norm(P[:, :, None, :] - envs.obst_centers[:, None, :, :],
                       axis=-1) - envs.obst_radii[:, None, :]
    D = np.where(envs.obst_valid[:, None, :], D, np.inf)
    k = D.argmin(axis=2)  # (E, A)
    e_idx = np.arange(E)[:, None]
    centers = envs.obst_centers[e_idx, k].reshape(-1, 3)
    offsets = envs.obst_radii[e_idx, k].ravel() + r_a + margin
    mask = envs.obst_valid[e_idx, k].ravel().astype(float)
    return centers, offsets, mask


def _obstacle_terms(p_t, v_t, centers, offsets, mask):
    dt = p_t.dtype
    c = centers.astype(dt)
    dist = ad.norm(ad.sub(c, p_t), axis=-1)
    d = ad.sub(dist, offsets.astype(dt))
    v_app = lo.approach_speed(p_t, v_t, c, np.zeros_like(c))
    return d, ad.mul(v_app, mask.astype(dt))


@dataclass
class RolloutResult:
    total: object                 # scalar Tensor
    terms: dict                   # name -> scalar Tensor
    diag: dict                    # plain-float diagnostics
    frozen: list = None           # recorded per-step constant inputs
    positions: np.ndarray = None  # (T+1, B, 3) when trajectory requested


def rollout(params, envs, T, obs, weights, seed, gamma_g=0.4,
            frozen=None, record_frozen=False, keep_positions=False):
    """Run T differentiable steps; returns accumulated mean losses.

    With an active Tape, the full step graph is recorded; without one this
    is a plain forward simulation.  ``seed`` (an int or tuple of ints) fixes
    the dynamics-noise and observation-noise streams per step, independent
    of trajectory, so two runs with the same seed see the same disturbances.
    ``frozen`` replays (and ``record_frozen`` captures) the per-step
    gradient-constant inputs.
    """
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    dyn = envs.dyn
    dtype = params.dtype
    arch = params.arch
    if (arch.in_height, arch.in_width) != obs.input_shape():
        raise ConfigError(
            f"encoder input {(arch.in_height, arch.in_width)} does not match "
            f"observation shape {obs.input_shape()}")
    if frozen is not None:
        record_frozen = False
    B, E, A = envs.B, envs.E, envs.A
    p = ad.Tensor(envs.starts.astype(dtype))
    v = ad.Tensor(np.zeros((B, 3), dtype=dtype))
    a_prev = ad.Tensor(np.zeros((B, 3), dtype=dtype))       # actual accel
    a_cmd_prev = ad.Tensor(np.zeros((B, 3), dtype=dtype))   # commanded accel
    h = pol.zero_hidden(arch, B, dtype=dtype)
    frames = envs.initial_frames()
    window = lo.VelocityWindow(30)
    pair_offset = 2.0 * dyn.agent_radius + dyn.margin

    term_sums = {}
    recorded = [] if record_frozen else None
    positions = [envs.starts.copy()] if keep_positions else None
    ever_violated = np.zeros(B, dtype=bool)
    diag_speed = 0.0
    diag_ground = 0.0
    diag_snap = 0.0
    a_cmd_hist = [np.zeros((B, 3)), np.zeros((B, 3))]

    for t in range(T):
        if frozen is not None:
            fz = frozen[t]
            frames = fz["frames"]
            x_obs = fz["obs"]
            v_cmd_w = fz["v_cmd_w"]
            tilt = fz["tilt"]
            m_in = fz["margin"]
            v_true = fz["v_true"]
            j_glob = fz["j_glob"]
            obst_sel = fz["obst_sel"]
        else:
            frames = wd.yaw_frames_from_velocity(
                v.data, frames, dyn.heading_speed_min)
            obs_rng = np.random.default_rng([*seed, _STREAM_OBS, t])
            x_obs = render_observations(p.data, frames, envs, obs,
                                        rng=obs_rng, dtype=dtype)
            v_cmd_w = wd.goal_velocity_command(
                p.data, envs.goals, envs.v_max[:, None], dyn.k_goal)
            tilt = wd.tilt_axis(a_cmd_hist[-1])
            m_in = np.clip(envs.min_clearances(p.data) / obs.prep.d_max,
                           -1.0, 1.0)
            v_true = None
            j_glob = None
            obst_sel = None

        v_cmd_yaw = np.einsum("bji,bj->bi", frames, v_cmd_w).astype(dtype)
        v_local = wd.rotate_rows(frames.astype(dtype), v, transpose=True)
        if v_true is None:
            v_true = v_local.data.copy()
            if recorded is not None:
                recorded.append({
                    "frames": frames.copy(), "obs": x_obs.copy(),
                    "v_cmd_w": v_cmd_w.copy(), "tilt": tilt.copy(),
                    "margin": m_in.copy(), "v_true": v_true,
                    "j_glob": None, "obst_sel": None,
                })
        s_vec = pol.build_state_vector(v_local, v_cmd_yaw, tilt.astype(dtype),
                                       m_in.reshape(B, 1).astype(dtype))
        z = pol.encode(params, ad.Tensor(x_obs[:, None, :, :]))
        h, a_pred, v_hat = pol.policy_step(params, h, z, s_vec)
        a_cmd_yaw = wd.clamp_norm(a_pred, dyn.a_max)
        a_cmd_w = wd.rotate_rows(frames.astype(dtype), a_cmd_yaw)

        xi = np.random.default_rng([*seed, _STREAM_XI, t]).normal(
            0.0, dyn.noise_std, size=(B, 3))
        a_new = wd.apply_dynamics(a_cmd_w, v, xi.astype(dtype), dyn.drag)
        p, v = wd.integrate_step(p, v, a_prev, a_new, dyn.dt)
        if not (np.isfinite(p.data).all() and np.isfinite(v.data).all()):
            bad = np.where(~np.isfinite(p.data).all(axis=1)
                           | ~np.isfinite(v.data).all(axis=1))[0]
            raise NumericError(
                f"non-finite state at step {t}, agents {bad.tolist()}")

        window.push(v)
        v_bar = window.mean()
        step_terms = {
            "v": lo.loss_velocity(v_bar, v_cmd_w.astype(dtype)),
            "v_hat": lo.loss_vel_pred(v_hat, v_true),
            "acc": lo.loss_acc(a_cmd_w),
            "jerk": lo.loss_jerk(a_cmd_w, a_cmd_prev, dyn.dt),
        }
        if A > 1:
            if j_glob is None:
                j_glob = _nearest_neighbor_idx(p.data, E, A)
                if recorded is not None:
                    recorded[-1]["j_glob"] = j_glob
            d_n, vapp_n = _neighbor_terms(p, v, j_glob, pair_offset)
            step_terms["col"] = lo.loss_collision(d_n, vapp_n, weights.kappa)
        if envs.obst_smax:
            if obst_sel is None:
                obst_sel = _nearest_obstacle_select(
                    p.data, envs, dyn.agent_radius, dyn.margin)
                if recorded is not None:
                    recorded[-1]["obst_sel"] = obst_sel
            d_o, vapp_o = _obstacle_terms(p, v, *obst_sel)
            step_terms["obj"] = lo.loss_obstacle(d_o, vapp_o)

        for name, val in step_terms.items():
            mean = val.mean()
            if not np.isfinite(mean.data).all():
                raise NumericError(
                    f"loss term {name} is non-finite at step {t}")
            term_sums[name] = mean if name not in term_sums \
                else ad.add(term_sums[name], mean)

        # carry attenuated-gradient state into the next step
        a_prev = a_new
        a_cmd_prev = a_cmd_w
        if gamma_g < 1.0:
            p = ad.scale_grad(p, gamma_g)
            v = ad.scale_grad(v, gamma_g)

        if keep_positions:
            positions.append(p.data.copy())
        ever_violated |= envs.violations(p.data)
        diag_speed += float(np.linalg.norm(v.data, axis=1).mean())
        diag_ground += float((np.maximum(p.data[:, 2], 0.0) ** 2).mean())
        a_cmd_hist.append(a_cmd_w.data.astype(float))
        snap = (a_cmd_hist[-1] - 2.0 * a_cmd_hist[-2] + a_cmd_hist[-3]) \
            / dyn.dt ** 2
        diag_snap += float((snap ** 2).sum(axis=1).mean())
        del a_cmd_hist[0]

    steps = max(T, 1)
    terms = {name: ad.mul(s, 1.0 / steps) for name, s in term_sums.items()}
    total = lo.total_step_loss(terms, weights) if terms \
        else ad.Tensor(np.zeros((), dtype=dtype))
    success = 1.0 - float(ever_violated.mean())
    mean_speed = diag_speed / steps
    diag = {
        "success": success,
        "ar": success * mean_speed,
        "speed": mean_speed,
        "ground_affinity": diag_ground / steps,
        "snap": diag_snap / steps,
    }
    return RolloutResult(total, terms, diag, recorded,
                         np.array(positions) if positions is not None else None)

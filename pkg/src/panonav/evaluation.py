"""Closed-loop evaluation: fixed-duration episodes with collision freezing,
aggregate safety metrics, method sweeps, and camera-failure ablations.

An episode runs every agent under a controller for a fixed wall of
simulated time.  The first margin violation freezes an agent in place for
the rest of the episode — it stops commanding but keeps acting as a
hazard for everyone else — so each agent contributes at most one
collision event.  Metrics aggregate those events into success rate,
collision rate (events per simulated second), and mean first-collision
time, where collision-free agents count the full episode duration.
"""

import csv
import subprocess
from dataclasses import dataclass

import numpy as np

from . import policy as pol
from . import world as wd
from .autodiff import Tensor
from .baselines import apf_step, dwa_step, privileged_observation
from .errors import ConfigError
from .rollout import _STREAM_OBS, _STREAM_XI, EnvBatch, render_observations
from .scenario import Scenario, make_circle_swap

EVAL_DURATION = 60.0

RESULT_FIELDS = ("method", "axis", "value", "map_seed",
                 "SR", "CR", "MFCT", "mean_speed", "duration")


# ---------------------------------------------------------------------------
# controllers: reset(env) then act(t, p, v, seed) -> (B, 3) world accel

class PolicyController:
    """Runs the trained network closed-loop, mirroring the training-time
    observation path step for step (no gradients recorded)."""

    def __init__(self, params, obs):
        self.params = params
        self.obs = obs
        if (params.arch.in_height, params.arch.in_width) != obs.input_shape():
            raise ConfigError(
                f"encoder input {(params.arch.in_height, params.arch.in_width)}"
                f" does not match observation shape {obs.input_shape()}")

    def reset(self, env):
        self.env = env
        self.h = pol.zero_hidden(self.params.arch, env.B,
                                 dtype=self.params.dtype)
        self.frames = env.initial_frames()
        self.a_cmd_prev = np.zeros((env.B, 3))

    def act(self, t, p, v, seed):
        env, obs, dyn = self.env, self.obs, self.env.dyn
        dtype = self.params.dtype
        self.frames = wd.yaw_frames_from_velocity(
            v, self.frames, dyn.heading_speed_min)
        rng = np.random.default_rng([*seed, _STREAM_OBS, t])
        x = render_observations(p, self.frames, env, obs, rng=rng,
                                dtype=dtype)
        v_cmd_w = wd.goal_velocity_command(p, env.goals, env.v_max[:, None],
                                           dyn.k_goal)
        v_cmd_yaw = np.einsum("bji,bj->bi", self.frames, v_cmd_w).astype(dtype)
        v_local = np.einsum("bji,bj->bi", self.frames, v).astype(dtype)
        tilt = wd.tilt_axis(self.a_cmd_prev).astype(dtype)
        m_in = np.clip(env.min_clearances(p) / obs.prep.d_max, -1.0, 1.0)
        s_vec = pol.build_state_vector(
            Tensor(v_local), v_cmd_yaw, tilt,
            m_in.reshape(-1, 1).astype(dtype))
        z = pol.encode(self.params, Tensor(x[:, None, :, :]))
        self.h, a_pred, _ = pol.policy_step(self.params, self.h, z, s_vec)
        a_yaw = wd.clamp_norm(a_pred, dyn.a_max)
        a_w = wd.rotate_rows(self.frames.astype(dtype), a_yaw).data
        self.a_cmd_prev = a_w.astype(float)
        return self.a_cmd_prev.copy()


class _PrivilegedController:
    """Shared plumbing for the classical planners: per-agent privileged
    observations, frozen neighbors still visible as hazards."""

    def __init__(self, cfg, step_fn):
        self.cfg = cfg
        self.step_fn = step_fn

    def reset(self, env):
        if env.E != 1:
            raise ConfigError("privileged controllers run one arena at a time")
        self.env = env

    def act(self, t, p, v, seed):
        env, cfg = self.env, self.cfg
        sph = env.spheres[0]
        a = np.zeros((env.B, 3))
        for i in range(env.B):
            ob = privileged_observation(p, v, i, sph[:, :3], sph[:, 3], cfg)
            a[i] = self.step_fn(ob, env.goals[i], cfg)
        return a


class APFController(_PrivilegedController):
    def __init__(self, cfg):
        super().__init__(cfg, apf_step)


class DWAController(_PrivilegedController):
    def __init__(self, cfg):
        super().__init__(cfg, dwa_step)


# ---------------------------------------------------------------------------
# episodes

@dataclass
class CollisionEvent:
    time: float
    agent: int
    hazard: str     # "agent" | "obstacle"


@dataclass
class EpisodeRecord:
    scenario_text: str
    seed: tuple
    dt: float
    duration: float
    positions: np.ndarray   # (T+1, A, 3)
    velocities: np.ndarray  # (T+1, A, 3)
    actions: np.ndarray     # (T, A, 3)
    events: list            # CollisionEvent, sorted by time
    mean_speed: float

    @property
    def n_agents(self):
        return self.positions.shape[1]

    @property
    def n_colliding(self):
        return len(self.events)


def _hazard_kind(env, P, i):
    """Which hazard class agent i is currently violating against."""
    d_agent = np.inf
    if env.A > 1:
        d_agent = wd.agent_clearances(
            P, env.dyn.agent_radius, env.dyn.margin)[i].min()
    d_obst = np.inf
    sph = env.spheres[0]
    if sph.shape[0]:
        d_obst = wd.obstacle_clearances(
            P[i:i + 1], sph[:, :3], sph[:, 3],
            env.dyn.agent_radius, env.dyn.margin).min()
    return "agent" if d_agent <= d_obst else "obstacle"


def run_episode(controller, scenario, dyn, duration=EVAL_DURATION, seed=0):
    """Simulate one arena for ``duration`` seconds of model time.

    Dynamics noise is drawn from the same counter-based stream layout as
    training, so a (controller, scenario, seed) triple replays bitwise.
    """
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    env = EnvBatch([scenario], dyn)
    A = env.A
    T = int(round(duration / dyn.dt))
    controller.reset(env)

    p = env.starts.astype(float).copy()
    v = np.zeros((A, 3))
    a_prev = np.zeros((A, 3))
    frozen = np.zeros(A, dtype=bool)
    positions = np.empty((T + 1, A, 3))
    velocities = np.empty((T + 1, A, 3))
    actions = np.empty((T, A, 3))
    positions[0], velocities[0] = p, v
    events = []
    speed_sum = 0.0
    speed_n = 0

    if env.violations(p).any():
        raise ConfigError("scenario starts inside a margin violation")

    for t in range(T):
        a_cmd = np.asarray(controller.act(t, p, v, seed), dtype=float)
        xi = np.random.default_rng([*seed, _STREAM_XI, t]).normal(
            0.0, dyn.noise_std, size=(A, 3))
        a_cmd[frozen] = 0.0
        xi[frozen] = 0.0
        a_new = a_cmd + xi - dyn.drag * v
        p = p + v * dyn.dt + 0.5 * a_prev * dyn.dt ** 2
        v = v + 0.5 * (a_prev + a_new) * dyn.dt
        a_prev = a_new
        p[frozen] = positions[t, frozen]
        v[frozen] = 0.0
        a_prev[frozen] = 0.0

        alive = ~frozen
        speed_sum += float(np.linalg.norm(v[alive], axis=1).sum())
        speed_n += int(alive.sum())

        new_hits = env.violations(p) & alive
        if new_hits.any():
            P = p.reshape(A, 3)
            for i in np.where(new_hits)[0]:
                events.append(CollisionEvent(
                    time=(t + 1) * dyn.dt, agent=int(i),
                    hazard=_hazard_kind(env, P, int(i))))
            frozen |= new_hits
            v[new_hits] = 0.0
            a_prev[new_hits] = 0.0

        actions[t] = a_cmd
        positions[t + 1], velocities[t + 1] = p, v

    events.sort(key=lambda e: (e.time, e.agent))
    return EpisodeRecord(
        scenario_text=scenario.to_text(), seed=seed, dt=dyn.dt,
        duration=T * dyn.dt, positions=positions, velocities=velocities,
        actions=actions, events=events,
        mean_speed=speed_sum / max(speed_n, 1))


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    sr: float          # fraction of agents that never violated a margin
    cr: float          # collision events per simulated second
    mfct: float        # mean time to first violation (duration if none)
    agents: int
    colliding: int
    episodes: int
    duration: float

    def row(self):
        return {"SR": self.sr, "CR": self.cr, "MFCT": self.mfct}


def compute_metrics(records):
    """Aggregate one or more episodes; per-episode rates are averaged so
    every arena counts equally regardless of its agent count."""
    if not records:
        raise ConfigError("no episodes to aggregate")
    srs, crs, mfcts = [], [], []
    agents = colliding = 0
    for r in records:
        n = r.n_agents
        first = np.full(n, r.duration)
        for e in r.events:
            first[e.agent] = min(first[e.agent], e.time)
        srs.append((n - r.n_colliding) / n)
        crs.append(r.n_colliding / r.duration)
        mfcts.append(float(first.mean()))
        agents += n
        colliding += r.n_colliding
    return MetricsReport(
        sr=float(np.mean(srs)), cr=float(np.mean(crs)),
        mfct=float(np.mean(mfcts)), agents=agents, colliding=colliding,
        episodes=len(records), duration=float(records[0].duration))


# ---------------------------------------------------------------------------
# sweeps

def swap_ring_radius(n):
    """Keep at least 2 m of arc spacing between circle-swap starts."""
    return max(6.0, 2.0 * n / (2.0 * np.pi))


def sweep_scenario(axis, value, map_seed):
    """One arena for a sweep point; the unswept axes hold their defaults."""
    if axis == "scale":
        n = int(value)
        return make_circle_swap(n, swap_ring_radius(n), 0.5, 1.5, map_seed)
    if axis == "density":
        return make_circle_swap(8, swap_ring_radius(8), float(value), 1.5,
                                map_seed)
    if axis == "speed":
        return make_circle_swap(8, swap_ring_radius(8), 0.5, float(value),
                                map_seed)
    raise ConfigError(f"unknown sweep axis {axis!r}; "
                      "expected scale, density, or speed")


def run_sweep(methods, dyn, axis, values, n_maps=3, duration=EVAL_DURATION,
              seed=0, verbose=False):
    """Evaluate every method on identical arenas along one difficulty axis.

    Each (value, map) pair builds one scenario, serialized once; every
    method parses the same bytes and runs with the same episode seed, so
    differences in the results table come from the controllers alone.
    """
    rows = []
    for vi, value in enumerate(values):
        for m in range(n_maps):
            # map and noise seeds depend only on the map index, so sweep
            # points that share geometry (the speed axis) replay the same
            # disturbances and differ only through the controller
            map_seed = int(np.random.default_rng(
                [seed, 29, m]).integers(2 ** 31))
            text = sweep_scenario(axis, value, map_seed).to_text()
            for name, controller in methods.items():
                sc = Scenario.from_text(text)
                if sc.to_text() != text:
                    raise ConfigError(
                        "scenario did not round-trip; methods would see "
                        "different arenas")
                rec = run_episode(controller, sc, dyn, duration=duration,
                                  seed=(seed, m))
                rep = compute_metrics([rec])
                rows.append({
                    "method": name, "axis": axis, "value": value,
                    "map_seed": map_seed, "SR": rep.sr, "CR": rep.cr,
                    "MFCT": rep.mfct, "mean_speed": rec.mean_speed,
                    "duration": rec.duration,
                })
                if verbose:
                    print(f"{axis}={value} map={m} {name}: "
                          f"SR={rep.sr:.3f} CR={rep.cr:.4f} "
                          f"MFCT={rep.mfct:.1f}")
    return rows


def results_to_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in RESULT_FIELDS})


# ---------------------------------------------------------------------------
# camera-failure ablation

ABLATION_CONDITIONS = ("none", "front", "left", "back", "right")


def single_agent_view(scenario, agent=0):
    """The same arena with every agent but one removed."""
    i = agent
    return Scenario(
        starts=scenario.starts[i:i + 1].copy(),
        goals=scenario.goals[i:i + 1].copy(),
        obstacle_centers=scenario.obstacle_centers.copy(),
        obstacle_radii=scenario.obstacle_radii.copy(),
        v_max=scenario.v_max[i:i + 1].copy(),
        arena_half=scenario.arena_half,
        cruise_alt=scenario.cruise_alt,
        seed=scenario.seed,
        kind=scenario.kind)


def run_occlusion_ablation(make_controller, scenario, dyn,
                           duration=EVAL_DURATION, seed=0, verbose=False):
    """Disable one camera at a time and rerun the same arena.

    ``make_controller(failed)`` builds a controller whose named camera
    reports the far-plane constant.  Runs every condition twice: with the
    full crowd and with a single agent among the obstacles.  Returns
    (rows, summary); summary carries the signed left-minus-right success
    gap per mode — reported, not judged.
    """
    rows = []
    by_key = {}
    for mode, sc in (("multi", scenario),
                     ("single", single_agent_view(scenario))):
        for cond in ABLATION_CONDITIONS:
            failed = () if cond == "none" else (cond,)
            rec = run_episode(make_controller(failed), sc, dyn,
                              duration=duration, seed=seed)
            rep = compute_metrics([rec])
            row = {"mode": mode, "condition": cond, "SR": rep.sr,
                   "CR": rep.cr, "MFCT": rep.mfct,
                   "mean_speed": rec.mean_speed}
            rows.append(row)
            by_key[(mode, cond)] = rep
            if verbose:
                print(f"{mode:6s} {cond:6s}: SR={rep.sr:.3f} "
                      f"CR={rep.cr:.4f} MFCT={rep.mfct:.1f}")
    summary = {
        f"{mode}_left_minus_right_sr":
            by_key[(mode, "left")].sr - by_key[(mode, "right")].sr
        for mode in ("multi", "single")
    }
    return rows, summary


# ---------------------------------------------------------------------------
# reports and frame dumps

def build_id():
    import os
    from . import __version__
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "-C", here, "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return f"panonav-{__version__}"


def write_report(path, rows, config_text="", title="evaluation"):
    """Human-readable results table with the config that produced it."""
    cols = list(rows[0].keys()) if rows else list(RESULT_FIELDS)
    lines = [f"# {title}", f"build: {build_id()}", ""]
    if config_text:
        lines.append("## config")
        lines.extend("    " + ln for ln in config_text.splitlines())
        lines.append("")
    lines.append("## results")
    widths = {c: max(len(c), 10) for c in cols}
    lines.append("  ".join(c.ljust(widths[c]) for c in cols))
    for row in rows:
        cells = []
        for c in cols:
            x = row.get(c, "")
            cells.append((f"{x:.4f}" if isinstance(x, float)
                          else str(x)).ljust(widths[c]))
        lines.append("  ".join(cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _overhead_frame(record, scenario, t, size=512):
    from PIL import Image, ImageDraw
    half = max(scenario.arena_half, 1.0)
    sc = size / (2.0 * half)

    def to_px(xy):
        return ((xy[0] + half) * sc, (half - xy[1]) * sc)

    img = Image.new("RGB", (size, size), (250, 250, 250))
    draw = ImageDraw.Draw(img)
    for c, r in zip(scenario.obstacle_centers, scenario.obstacle_radii):
        x, y = to_px(c)
        draw.ellipse([x - r * sc, y - r * sc, x + r * sc, y + r * sc],
                     fill=(180, 180, 180))
    A = record.n_agents
    for i in range(A):
        hue = int(255 * i / max(A - 1, 1))
        color = (hue, 80, 255 - hue)
        trail = record.positions[max(0, t - 50):t + 1, i]
        if len(trail) > 1:
            draw.line([to_px(q) for q in trail], fill=color, width=1)
        x, y = to_px(record.positions[t, i])
        r = 0.15 * sc
        draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
        gx, gy = to_px(scenario.goals[i])
        draw.line([gx - 3, gy - 3, gx + 3, gy + 3], fill=color)
        draw.line([gx - 3, gy + 3, gx + 3, gy - 3], fill=color)
    return img


def dump_frames(record, out_dir, every=1, pano=None, dyn=None):
    """PNG snapshot per recorded step plus an index manifest.

    Always writes the overhead view; when ``pano`` settings and ``dyn``
    are given, also re-renders agent 0's stitched depth panorama.
    Requires Pillow.
    """
    import os
    os.makedirs(out_dir, exist_ok=True)
    scenario = Scenario.from_text(record.scenario_text)
    env = EnvBatch([scenario], dyn) if pano is not None else None
    frames = env.initial_frames() if env is not None else None
    names = []
    steps = range(0, record.positions.shape[0], every)
    for t in steps:
        name = f"overhead_{t:05d}.png"
        _overhead_frame(record, scenario, t).save(
            os.path.join(out_dir, name))
        names.append(name)
        if env is not None:
            from PIL import Image
            v = record.velocities[t]
            frames = wd.yaw_frames_from_velocity(
                v, frames, dyn.heading_speed_min)
            raw = render_observations(record.positions[t], frames, env,
                                      pano)
            gray = np.clip(255.0 * raw[0], 0, 255).astype(np.uint8)
            pname = f"pano_{t:05d}.png"
            Image.fromarray(gray, mode="L").save(
                os.path.join(out_dir, pname))
            names.append(pname)
    with open(os.path.join(out_dir, "index.txt"), "w") as fh:
        fh.write("\n".join(names) + "\n")
    return names

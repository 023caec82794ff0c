"""Scenario generation and serialization.

A Scenario is a set of (start, goal) pairs, sphere obstacles, per-agent speed
commands, and arena metadata.  Generators are pure functions of (config,
seed); scenario files are YAML documents that round-trip byte-exactly so
evaluation maps can be replayed and shared across methods.
"""

from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigError

ARENA_PAD = 2.0        # m beyond the spawn ring
SPAWN_CLEARANCE = 1.0  # m of free space required around starts and goals
OBSTACLE_RADIUS_RANGE = (0.5, 1.5)
OBSTACLE_Z_BAND = 1.0  # obstacles centered within cruise_alt +- this


@dataclass
class Scenario:
    starts: np.ndarray            # (N, 3)
    goals: np.ndarray             # (N, 3)
    obstacle_centers: np.ndarray  # (S, 3)
    obstacle_radii: np.ndarray    # (S,)
    v_max: np.ndarray             # (N,) commanded cruise speed per agent
    arena_half: float
    cruise_alt: float
    seed: int | None = None
    kind: str = "custom"

    @property
    def n_agents(self):
        return self.starts.shape[0]

    @property
    def n_obstacles(self):
        return self.obstacle_centers.shape[0]

    def rotated(self, psi):
        """Whole-scene yaw rotation about the world z axis through the origin."""
        c, s = np.cos(psi), np.sin(psi)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Scenario(
            starts=self.starts @ R.T,
            goals=self.goals @ R.T,
            obstacle_centers=(self.obstacle_centers @ R.T
                              if self.n_obstacles else self.obstacle_centers),
            obstacle_radii=self.obstacle_radii.copy(),
            v_max=self.v_max.copy(),
            arena_half=self.arena_half,
            cruise_alt=self.cruise_alt,
            seed=self.seed,
            kind=self.kind,
        )

    def to_text(self):
        doc = {
            "kind": self.kind,
            "seed": self.seed,
            "arena_half": float(self.arena_half),
            "cruise_alt": float(self.cruise_alt),
            "agents": [
                {
                    "start": [float(x) for x in self.starts[i]],
                    "goal": [float(x) for x in self.goals[i]],
                    "v_max": float(self.v_max[i]),
                }
                for i in range(self.n_agents)
            ],
            "obstacles": [
                {
                    "center": [float(x) for x in self.obstacle_centers[i]],
                    "radius": float(self.obstacle_radii[i]),
                }
                for i in range(self.n_obstacles)
            ],
        }
        return yaml.safe_dump(doc, sort_keys=False)

    @classmethod
    def from_text(cls, text):
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"unparseable scenario text: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("scenario text must be a mapping")
        agents = doc.get("agents", [])
        obstacles = doc.get("obstacles", [])
        try:
            return cls(
                starts=np.array([a["start"] for a in agents], dtype=float).reshape(-1, 3),
                goals=np.array([a["goal"] for a in agents], dtype=float).reshape(-1, 3),
                obstacle_centers=np.array(
                    [o["center"] for o in obstacles], dtype=float).reshape(-1, 3),
                obstacle_radii=np.array(
                    [o["radius"] for o in obstacles], dtype=float),
                v_max=np.array([a["v_max"] for a in agents], dtype=float),
                arena_half=float(doc["arena_half"]),
                cruise_alt=float(doc["cruise_alt"]),
                seed=doc.get("seed"),
                kind=doc.get("kind", "custom"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed scenario text: {e!r}") from e


def _sample_obstacles(rng, count, arena_half, cruise_alt, keepout_points,
                      keepout_clearance):
    """Rejection-sample sphere obstacles clear of the given points."""
    centers, radii = [], []
    budget = 200 * max(count, 1)
    while len(centers) < count:
        if budget <= 0:
            raise ConfigError(
                f"obstacle density infeasible: placed {len(centers)} of "
                f"{count} within the retry budget")
        budget -= 1
        c = np.array([
            rng.uniform(-arena_half, arena_half),
            rng.uniform(-arena_half, arena_half),
            cruise_alt + rng.uniform(-OBSTACLE_Z_BAND, OBSTACLE_Z_BAND),
        ])
        r = rng.uniform(*OBSTACLE_RADIUS_RANGE)
        if len(keepout_points):
            d = np.linalg.norm(keepout_points - c, axis=1)
            if (d < r + keepout_clearance).any():
                continue
        centers.append(c)
        radii.append(r)
    return (np.array(centers).reshape(-1, 3), np.array(radii))


def _resolve_speeds(rng, n, speed):
    """speed is a scalar or a (lo, hi) uniform range."""
    if np.isscalar(speed):
        return np.full(n, float(speed))
    lo, hi = speed
    return rng.uniform(lo, hi, size=n)


def make_circle_swap(n, ring_radius, rho_obs, speed, seed, cruise_alt=1.5):
    """Agents evenly spaced on a ring, each goal the diametric antipode of
    its start, forcing every trajectory through the congested center.

    rho_obs is obstacles per 100 m^2 of arena footprint; obstacle radii are
    drawn U[0.5, 1.5] m and centers rejected near starts/goals.
    """
    if n < 2:
        raise ConfigError("circle-swap needs at least 2 agents")
    if ring_radius <= 0:
        raise ConfigError("ring_radius must be positive")
    rng = np.random.default_rng(seed)
    ang = 2.0 * np.pi * np.arange(n) / n
    starts = np.column_stack([
        ring_radius * np.cos(ang), ring_radius * np.sin(ang),
        np.full(n, cruise_alt)])
    goals = starts.copy()
    goals[:, :2] *= -1.0
    arena_half = ring_radius + ARENA_PAD
    count = int(round(rho_obs * (2.0 * arena_half) ** 2 / 100.0))
    keepout = np.vstack([starts, goals])
    centers, radii = _sample_obstacles(
        rng, count, arena_half, cruise_alt, keepout, SPAWN_CLEARANCE)
    return Scenario(starts=starts, goals=goals, obstacle_centers=centers,
                    obstacle_radii=radii, v_max=_resolve_speeds(rng, n, speed),
                    arena_half=arena_half, cruise_alt=cruise_alt, seed=seed,
                    kind="circle_swap")


def make_dispersal(n, ring_radius, goal_dist, n_obstacles, speed, seed,
                   cruise_alt=1.5, obstacle_radius=0.5):
    """Training smoke scenario: agents spawn shoulder-to-shoulder on a tight
    ring and fly radially outward to well-separated goals.

    The tight spawn makes inter-agent proximity (and hence the collision
    penalty) large under an untrained policy, so learning to track the
    outward command visibly shrinks it.  Fixed-count obstacles sit between
    the spawn ring and the goals at jittered bearings.
    """
    if n < 1:
        raise ConfigError("dispersal needs at least 1 agent")
    rng = np.random.default_rng(seed)
    ang = 2.0 * np.pi * np.arange(n) / n
    starts = np.column_stack([
        ring_radius * np.cos(ang), ring_radius * np.sin(ang),
        np.full(n, cruise_alt)])
    goals = np.column_stack([
        goal_dist * np.cos(ang), goal_dist * np.sin(ang),
        np.full(n, cruise_alt)])
    mid = 0.5 * (ring_radius + goal_dist)
    obs_ang = (2.0 * np.pi * (np.arange(max(n_obstacles, 1)) + 0.5)
               / max(n_obstacles, 1) + rng.uniform(-0.15, 0.15))
    centers = np.column_stack([
        mid * np.cos(obs_ang[:n_obstacles]),
        mid * np.sin(obs_ang[:n_obstacles]),
        cruise_alt + rng.uniform(-0.3, 0.3, size=n_obstacles)])
    radii = np.full(n_obstacles, obstacle_radius)
    return Scenario(starts=starts, goals=goals,
                    obstacle_centers=centers.reshape(-1, 3),
                    obstacle_radii=radii,
                    v_max=_resolve_speeds(rng, n, speed),
                    arena_half=goal_dist + ARENA_PAD, cruise_alt=cruise_alt,
                    seed=seed, kind="dispersal")


def rotate_scene(scenario, psi):
    """Functional alias for Scenario.rotated."""
    return scenario.rotated(psi)

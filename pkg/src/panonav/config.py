"""One config tree for everything: YAML files in, dotted-key overrides on
top, byte-stable echo out.

The tree is plain nested dataclasses.  ``to_yaml(from_yaml(text))`` is a
fixed point after the first round trip, so configs embedded in manifests
and reports compare byte-for-byte.  Unknown keys fail loudly with the
closest valid key suggested.
"""

import datetime
import difflib
import os
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .baselines import BaselineConfig
from .errors import ConfigError
from .losses import LossWeights
from .perception import CameraRig, PanoramaConfig, PreprocessConfig
from .policy import ArchConfig
from .rollout import ObsSettings
from .training import TrainConfig
from .world import DynamicsConfig

OUT_DIR_ENV = "PANONAV_OUT"


@dataclass
class ObsConfig:
    """Observation-path knobs that sit beside the rig/panorama blocks."""
    mode: str = "panorama"        # "panorama" | "forward"
    d_far: float = 100.0          # render far plane / failed-camera fill, m
    prune: float = 30.0           # sphere cull radius for rendering, m
    failed: tuple = ()            # camera names rendered as all-far

    def validate(self):
        if self.mode not in ("panorama", "forward"):
            raise ConfigError(f"obs.mode must be panorama or forward, "
                              f"got {self.mode!r}")
        return self


@dataclass
class ScenarioConfig:
    """Training scenario source; evaluation builds its own arenas."""
    kind: str = "dispersal"       # "dispersal" | "circle_swap"
    ring_radius: float = 0.35     # dispersal spawn ring, m
    goal_dist: float = 5.0
    n_obstacles: int = 4
    obstacle_radius: float = 0.5
    speed: float = 2.0
    swap_ring_radius: float = 6.0  # circle-swap ring, m
    rho_obs: float = 0.5           # circle-swap obstacle density

    def validate(self):
        if self.kind not in ("dispersal", "circle_swap"):
            raise ConfigError(f"scenario.kind must be dispersal or "
                              f"circle_swap, got {self.kind!r}")
        return self


@dataclass
class EvalConfig:
    duration: float = 60.0        # episode length, s
    n_maps: int = 3
    n_agents: int = 16
    axis: str = "scale"           # sweep axis: scale | density | speed
    values: tuple = (8, 16)
    seed: int = 0
    frames: bool = False          # dump per-step PNG frames

    def validate(self):
        if self.axis not in ("scale", "density", "speed"):
            raise ConfigError(f"eval.axis must be scale, density, or "
                              f"speed, got {self.axis!r}")
        return self


@dataclass
class RunConfig:
    out_dir: str = "runs"
    run_name: str = "run"
    precision: str = "float64"    # float32 | float64
    workers: int = 0              # kernel threads; 0 = all logical cores
    train: TrainConfig = field(default_factory=TrainConfig)
    dyn: DynamicsConfig = field(default_factory=DynamicsConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    rig: CameraRig = field(default_factory=CameraRig)
    pano: PanoramaConfig = field(default_factory=PanoramaConfig)
    prep: PreprocessConfig = field(default_factory=PreprocessConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, "
                              f"got {self.precision!r}")
        try:
            self.train.validate()
            self.dyn.validate()
            self.loss.validate()
            self.baseline.validate()
        except ValueError as e:   # sub-configs outside the config module
            raise ConfigError(str(e)) from e
        self.obs.validate()
        self.scenario.validate()
        self.eval.validate()
        return self

    @property
    def dtype(self):
        import numpy as np
        return np.float32 if self.precision == "float32" else np.float64

    def obs_settings(self):
        return ObsSettings(rig=self.rig, pano=self.pano, prep=self.prep,
                           mode=self.obs.mode, d_far=self.obs.d_far,
                           prune=self.obs.prune,
                           failed=tuple(self.obs.failed))

    def scenario_factory(self):
        from . import training as tr
        s = self.scenario
        if s.kind == "dispersal":
            return tr.dispersal_factory(s.ring_radius, s.goal_dist,
                                        s.n_obstacles, s.speed,
                                        s.obstacle_radius)
        return tr.circle_swap_factory(s.swap_ring_radius, s.rho_obs, s.speed)

    def resolved_out_dir(self):
        root = os.environ.get(OUT_DIR_ENV, self.out_dir)
        return os.path.join(root, self.run_name)


# ---------------------------------------------------------------------------
# tree <-> plain data

def to_tree(obj):
    """Dataclass to nested plain dict; tuples become lists for YAML."""
    def conv(v):
        if is_dataclass(v):
            return to_tree(v)
        if isinstance(v, (tuple, list)):
            return [conv(x) for x in v]
        return v
    return {f.name: conv(getattr(obj, f.name)) for f in fields(obj)}


def _coerce(value, template, path):
    if is_dataclass(template):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} expects a mapping")
        return from_tree(type(template), value, path)
    if isinstance(template, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} expects a list")
        def tup(v):
            return tuple(tup(x) if isinstance(x, (list, tuple)) else x
                         for x in v)
        return tup(value)
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects true/false")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{path} expects an integer") from None
        if isinstance(value, float) and value != int(value):
            raise ConfigError(f"{path} expects an integer")
        if isinstance(value, (int, float)):
            return int(value)
        raise ConfigError(f"{path} expects an integer")
    if isinstance(template, float):
        if isinstance(value, str):   # yaml reads bare "5e-4" as a string
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{path} expects a number") from None
        if value is None or isinstance(value, (int, float)):
            return None if value is None else float(value)
        raise ConfigError(f"{path} expects a number")
    return value


def from_tree(cls, tree, path=""):
    """Build ``cls`` from a nested dict, rejecting unknown keys with the
    nearest valid alternative."""
    proto = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in (tree or {}).items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            hint = difflib.get_close_matches(key, sorted(known), n=1)
            more = f"; closest valid key: {path + '.' if path else ''}" \
                   f"{hint[0]}" if hint else ""
            raise ConfigError(f"unknown config key {where!r}{more}")
        kwargs[key] = _coerce(value, getattr(proto, key), where)
    return cls(**kwargs)


def config_keys(cls=RunConfig, prefix=""):
    """All dotted keys with their default values, in declaration order."""
    out = []
    proto = cls()
    for f in fields(cls):
        v = getattr(proto, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.extend(config_keys(type(v), key + "."))
        else:
            out.append((key, v))
    return out


# ---------------------------------------------------------------------------
# YAML in / out

def to_yaml(cfg):
    return yaml.safe_dump(to_tree(cfg), sort_keys=False)


def from_yaml(text):
    doc = yaml.safe_load(text)
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must be a mapping")
    if "config" in doc and "build" in doc:
        doc = doc["config"]        # accept a RunManifest transparently
    return from_tree(RunConfig, doc)


def load_config(path=None, overrides=()):
    """File (optional) + overrides -> validated RunConfig."""
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path) as fh:
                cfg = from_yaml(fh.read())
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings on top of a config."""
    tree = to_tree(cfg)
    valid = [k for k, _ in config_keys(type(cfg))]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in valid:
            hint = difflib.get_close_matches(key, valid, n=1)
            more = f"; closest valid key: {hint[0]}" if hint else ""
            raise ConfigError(f"unknown config key {key!r}{more}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse value for {key}: {e}") from e
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return from_tree(type(cfg), tree)


# ---------------------------------------------------------------------------
# run manifests

@dataclass
class RunManifest:
    command: str
    build: str
    created: str
    seed: int
    outputs: list
    config: dict


def write_manifest(out_dir, command, cfg, seed, outputs):
    """Record how a run was produced, before the run starts.

    The embedded config block is the full resolved tree; pointing the CLI
    at the manifest file reruns with the identical configuration.
    """
    from .evaluation import build_id
    os.makedirs(out_dir, exist_ok=True)
    doc = {
        "command": command,
        "build": build_id(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "seed": int(seed),
        "outputs": list(outputs),
        "config": to_tree(cfg),
    }
    path = os.path.join(out_dir, "manifest.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path

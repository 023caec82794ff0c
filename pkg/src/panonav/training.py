"""Training loop: batched rollouts, backprop through time, AdamW.

Each iteration samples fresh scenarios (new random seed per environment),
applies a random yaw rotation psi ~ U[-psi_max, psi_max] to each, rolls out
T differentiable steps, backpropagates the batch-mean loss, clips the global
gradient norm, and applies a decoupled-weight-decay adaptive-moment update
under a cosine learning-rate schedule.

All randomness is drawn from counter-based streams keyed by
(seed, stream, iteration), so resuming from a checkpoint at iteration k
reproduces the continuation bit-for-bit without serializing generators.
"""

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import policy as pol
from . import rollout as ro
from . import scenario as sc
from .errors import CheckpointError, ConfigError

# iteration-level stream tags (rollout owns its own per-step tags)
_STREAM_AGENTS = 5
_STREAM_SCENE = 7
_STREAM_PSI = 11
_STREAM_ROLLOUT = 13
# held-out probe draws from an iteration index no training run reaches
_PROBE_ITERATION = 2 ** 31 - 1

LOG_FIELDS = ("iteration", "total", "success", "ar", "l_col", "l_v",
              "l_obj", "l_jerk", "snap", "l_acc", "ground_affinity",
              "speed", "lr")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024      # total agent-rollouts per iteration
    horizon: int = 165          # steps per rollout
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma_g: float = 0.4
    psi_max: float = 0.75       # rotation augmentation half-range, rad
    agents_min: int = 4
    agents_max: int = 8
    grad_clip: float = 10.0     # global-norm ceiling; 0 disables
    seed: int = 0
    eval_every: int = 0         # 0 disables the held-out probe
    checkpoint_every: int = 500
    log_every: int = 1

    def validate(self):
        if self.batch_size < self.agents_max:
            raise ConfigError("batch_size smaller than agents_max")
        if not 0.0 < self.gamma_g <= 1.0:
            raise ConfigError("gamma_g must lie in (0, 1]")
        if self.agents_min < 1 or self.agents_max < self.agents_min:
            raise ConfigError("bad agents-per-env range")
        if self.horizon < 0 or self.iterations < 0:
            raise ConfigError("negative horizon or iteration count")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            raise ConfigError("need lr >= lr_min >= 0 and lr > 0")
        return self


def cosine_lr(t, t_max, lr0, lr_min):
    """lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / t_max))."""
    if t_max <= 0:
        return lr0
    frac = min(max(t / t_max, 0.0), 1.0)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + np.cos(np.pi * frac))


def global_grad_norm(params):
    return float(np.sqrt(sum(
        float((t.grad.astype(np.float64) ** 2).sum())
        for t in params.values())))


def clip_global_norm(params, max_norm):
    """Scale every gradient so the joint norm is at most max_norm."""
    gn = global_grad_norm(params)
    if max_norm > 0 and gn > max_norm:
        scale = max_norm / gn
        for t in params.values():
            t.grad *= scale
    return gn


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over a param bank."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, params, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, t in params.items():
            g = t.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data -= (lr * update).astype(t.data.dtype)

    def state_arrays(self):
        out = {"step_count": np.int64(self.step_count)}
        for k in self.m:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["step_count"])
        for k in self.m:
            mk, vk = "m." + k, "v." + k
            if mk not in arrays or vk not in arrays:
                raise CheckpointError(f"optimizer state missing {k}")
            if arrays[mk].shape != self.m[k].shape:
                raise CheckpointError(f"optimizer state shape mismatch at {k}")
            self.m[k] = np.asarray(arrays[mk])
            self.v[k] = np.asarray(arrays[vk])


def dispersal_factory(ring_radius=0.35, goal_dist=5.0, n_obstacles=4,
                      speed=2.0, obstacle_radius=0.5):
    """Scenario source for training: agents packed on a small ring pushing
    outward through a ring of obstacles."""
    def make(n_agents, seed):
        return sc.make_dispersal(n_agents, ring_radius, goal_dist,
                                 n_obstacles, speed, seed=seed,
                                 obstacle_radius=obstacle_radius)
    return make


def circle_swap_factory(ring_radius=6.0, rho_obs=0.5, speed=2.0):
    def make(n_agents, seed):
        return sc.make_circle_swap(n_agents, ring_radius, rho_obs, speed,
                                   seed=seed)
    return make


def sample_iteration_envs(cfg, factory, dyn, iteration):
    """Build the EnvBatch for one iteration: agent count, fresh scenarios,
    and rotation augmentation all drawn from counter-based streams."""
    a_rng = np.random.default_rng([cfg.seed, _STREAM_AGENTS, iteration])
    n_agents = int(a_rng.integers(cfg.agents_min, cfg.agents_max + 1))
    n_envs = max(1, cfg.batch_size // n_agents)
    psi_rng = np.random.default_rng([cfg.seed, _STREAM_PSI, iteration])
    psi = psi_rng.uniform(-cfg.psi_max, cfg.psi_max, size=n_envs)
    scens = []
    for e in range(n_envs):
        scene_seed = int(np.random.default_rng(
            [cfg.seed, _STREAM_SCENE, iteration, e]).integers(2 ** 31))
        s = factory(n_agents, scene_seed)
        if cfg.psi_max > 0:
            s = sc.rotate_scene(s, float(psi[e]))
        scens.append(s)
    return ro.EnvBatch(scens, dyn)


def train_iteration(params, optim, cfg, factory, dyn, obs, weights,
                    iteration):
    """One full step: sample envs, rollout, backward, clip, update.

    Returns the CSV row dict for this iteration."""
    envs = sample_iteration_envs(cfg, factory, dyn, iteration)
    params.zero_grad()
    with ad.Tape() as tape:
        res = ro.rollout(params, envs, cfg.horizon, obs, weights,
                         seed=(cfg.seed, _STREAM_ROLLOUT, iteration),
                         gamma_g=cfg.gamma_g)
        tape.backward(res.total)
    clip_global_norm(params, cfg.grad_clip)
    lr = cosine_lr(iteration, cfg.iterations, cfg.lr, cfg.lr_min)
    optim.step(params, lr)

    def term(name):
        t = res.terms.get(name)
        return float(t.data) if t is not None else 0.0

    return {
        "iteration": iteration,
        "total": float(res.total.data),
        "success": res.diag["success"],
        "ar": res.diag["ar"],
        "l_col": term("col"),
        "l_v": term("v"),
        "l_obj": term("obj"),
        "l_jerk": term("jerk"),
        "snap": res.diag["snap"],
        "l_acc": term("acc"),
        "ground_affinity": res.diag["ground_affinity"],
        "speed": res.diag["speed"],
        "lr": lr,
    }


def _ckpt_paths(out_dir, iteration):
    stem = os.path.join(out_dir, f"ckpt_{iteration:06d}")
    return stem + ".bin", stem + ".opt.npz"


def save_training_state(params, optim, out_dir, iteration):
    os.makedirs(out_dir, exist_ok=True)
    pth, opt = _ckpt_paths(out_dir, iteration)
    pol.save_checkpoint(params, pth, dtype=params.dtype)
    np.savez(opt, iteration=np.int64(iteration), **optim.state_arrays())
    return pth


def load_training_state(params, optim, out_dir, iteration):
    """Restore params + optimizer moments saved at ``iteration``."""
    pth, opt = _ckpt_paths(out_dir, iteration)
    bank = pol.load_checkpoint(pth, expect_arch=params.arch, verbose=False)
    params.load_flat(bank.flat())
    with np.load(opt) as z:
        arrays = {k: z[k] for k in z.files}
    if int(arrays.pop("iteration")) != iteration:
        raise CheckpointError("optimizer sidecar iteration mismatch")
    optim.load_state_arrays(arrays)


def train(params, cfg, factory, dyn, obs, weights, out_dir,
          start_iteration=0, stop_iteration=None, optim=None,
          log_name="train_log.csv", verbose=True, probe_factory=None):
    """Run training up to ``stop_iteration`` (default cfg.iterations),
    appending telemetry to the CSV log.

    The lr schedule always spans cfg.iterations, so stopping early and
    resuming with ``start_iteration`` reproduces an unbroken run exactly.
    Pass a restored optimizer when resuming; checkpoints land in
    ``out_dir``.  Returns (history rows, optimizer).
    """
    cfg.validate()
    stop = cfg.iterations if stop_iteration is None else stop_iteration
    os.makedirs(out_dir, exist_ok=True)
    if optim is None:
        optim = AdamW(params, cfg.beta1, cfg.beta2, cfg.adam_eps,
                      cfg.weight_decay)
    log_path = os.path.join(out_dir, log_name)
    fresh = start_iteration == 0 or not os.path.exists(log_path)
    history = []
    with open(log_path, "a" if not fresh else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if fresh:
            writer.writeheader()
        for it in range(start_iteration, stop):
            row = train_iteration(params, optim, cfg, factory, dyn, obs,
                                  weights, it)
            history.append(row)
            if cfg.log_every and it % cfg.log_every == 0:
                writer.writerow(row)
                fh.flush()
            if verbose and (it % max(1, cfg.iterations // 20) == 0
                            or it == stop - 1):
                print(f"iter {it:5d}  total {row['total']:.4f}  "
                      f"l_col {row['l_col']:.4f}  speed {row['speed']:.2f}  "
                      f"lr {row['lr']:.2e}")
            if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_training_state(params, optim, out_dir, it + 1)
            if cfg.eval_every and (it + 1) % cfg.eval_every == 0 \
                    and probe_factory is not None:
                probe = sample_iteration_envs(
                    dataclasses.replace(cfg, psi_max=0.0), probe_factory,
                    dyn, iteration=_PROBE_ITERATION)
                pres = ro.rollout(params, probe, cfg.horizon, obs, weights,
                                  seed=(cfg.seed, _STREAM_ROLLOUT,
                                        _PROBE_ITERATION),
                                  gamma_g=1.0)
                if verbose:
                    print(f"  probe: total {float(pres.total.data):.4f} "
                          f"success {pres.diag['success']:.3f}")
    save_training_state(params, optim, out_dir, stop)
    return history, optim

"""Differentiable per-step loss terms and their weighted total.

Six terms: velocity tracking (smooth-L1 on the 30-step running-average
velocity error), auxiliary velocity prediction (MSE), neighbor collision
penalty softplus(-kappa*d)*v_app, obstacle barrier v_app*max(0, 1-d)^2,
acceleration magnitude, and finite-difference jerk.  Distances d are
margin-adjusted (radii and safety margin already subtracted); v_app is the
nonnegative approach speed toward the hazard.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NumericError


@dataclass
class LossWeights:
    v: float = 1.0
    v_hat: float = 2.0
    col: float = 5.0
    obj: float = 2.0
    acc: float = 0.01
    jerk: float = 0.001
    kappa: float = 4.0  # collision penalty sharpness, 1/m

    def validate(self):
        for name in ("v", "v_hat", "col", "obj", "acc", "jerk"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


TERM_NAMES = ("v", "v_hat", "col", "obj", "acc", "jerk")


def loss_velocity(v_bar, v_star, delta=1.0):
    """Smooth-L1 of the tracking error norm; (B,3) x (B,3) -> (B,)."""
    err = ad.norm(ad.sub(v_bar, ad._wrap(v_star)), axis=-1)
    return ad.smooth_l1(err, delta=delta)


def loss_vel_pred(v_hat, v_true):
    """Componentwise MSE; (B,3) x (B,3) -> (B,)."""
    d = ad.sub(v_hat, ad._wrap(v_true))
    return ad.tmean(ad.square(d), axis=-1)


def loss_collision(d, v_app, kappa=4.0):
    """softplus(-kappa*d) * v_app; (B,) -> (B,)."""
    return ad.mul(ad.softplus(ad.mul(d, -float(kappa))), v_app)


def loss_obstacle(d, v_app):
    """v_app * max(0, 1-d)^2 with a one-meter influence band; (B,) -> (B,)."""
    return ad.mul(v_app, ad.square(ad.relu(ad.sub(1.0, d))))


def loss_acc(a):
    """Squared acceleration norm; (B,3) -> (B,)."""
    return ad.tsum(ad.square(a), axis=-1)


def loss_jerk(a, a_prev, dt):
    """Squared finite-difference jerk norm; first step passes a_prev = a."""
    j = ad.mul(ad.sub(a, a_prev), 1.0 / dt)
    return ad.tsum(ad.square(j), axis=-1)


def approach_speed(p_a, v_a, p_b, v_b, eps=1e-12):
    """max(0, -d/dt of |p_b - p_a|); all (B,3) -> (B,).

    Rows with (near-)coincident positions would have an undefined closing
    direction; callers substitute a fallback direction beforehand.
    """
    rel_p = ad.sub(ad._wrap(p_b), ad._wrap(p_a))
    rel_v = ad.sub(ad._wrap(v_b), ad._wrap(v_a))
    dist = ad.norm(rel_p, axis=-1, eps=eps)
    closing = ad.div(ad.tsum(ad.mul(rel_p, rel_v), axis=-1), dist)
    return ad.relu(ad.neg(closing))


def total_step_loss(terms, weights, step=None):
    """Weighted sum of scalar term tensors; flags non-finite terms by name."""
    total = None
    for name in TERM_NAMES:
        term = terms.get(name)
        if term is None:
            continue
        if not np.isfinite(term.data).all():
            where = f" at step {step}" if step is not None else ""
            raise NumericError(f"loss term {name} is non-finite{where}")
        weighted = ad.mul(term, float(getattr(weights, name)))
        total = weighted if total is None else ad.add(total, weighted)
    return total


class VelocityWindow:
    """Running mean of the most recent 30 per-step velocity tensors.

    Keeps a running sum (two tensor ops per push) plus the deque of live
    references, so the mean stays differentiable through every contributing
    step.  Reset at episode start.
    """

    def __init__(self, capacity=30):
        self.capacity = capacity
        self._buf = deque()
        self._sum = None

    def reset(self):
        self._buf.clear()
        self._sum = None

    def push(self, v):
        v = ad._wrap(v)
        self._buf.append(v)
        self._sum = v if self._sum is None else ad.add(self._sum, v)
        if len(self._buf) > self.capacity:
            old = self._buf.popleft()
            self._sum = ad.sub(self._sum, old)

    def __len__(self):
        return len(self._buf)

    def mean(self):
        if not self._buf:
            raise ValueError("velocity window is empty")
        return ad.mul(self._sum, 1.0 / len(self._buf))

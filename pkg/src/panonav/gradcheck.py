"""Finite-difference verification suites over ops, losses, and rollouts.

Each suite returns [(name, max_rel_err, threshold, ok)] so callers can
print one line per check.  All checks run in float64 with frozen inputs;
the rollout check replays recorded observations and disturbances so the
loss is an exact deterministic function of the parameters being probed.
"""

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import policy as pol
from . import rollout as ro
from . import world as wd
from .perception import CameraRig, PanoramaConfig, PreprocessConfig
from .scenario import make_circle_swap

OP_TOL = 1e-6
ROLLOUT_TOL = 1e-5


def _leaf(arr):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _t(rng, *shape):
    return _leaf(rng.standard_normal(shape))


def op_cases(seed=0):
    """(name, build) pairs; build() -> (fn, wrt) for grad_check."""
    rng = np.random.default_rng(seed)
    cases = []

    def case(name):
        def deco(build):
            cases.append((name, build))
            return build
        return deco

    def pair(op):
        a, b = _t(rng, 4, 3), _t(rng, 4, 3)
        return lambda: op(a, b).mean(), [a, b]

    case("add")(lambda: pair(ad.add))
    case("sub")(lambda: pair(ad.sub))
    case("mul")(lambda: pair(ad.mul))

    def build_div():
        a, b = _t(rng, 4, 3), _leaf(rng.uniform(0.5, 2.0, (4, 3)))
        return lambda: ad.div(a, b).mean(), [a, b]
    case("div")(build_div)

    def build_broadcast():
        a, b = _t(rng, 4, 3), _t(rng, 3)
        return lambda: ad.mul(ad.add(a, b), b).mean(), [a, b]
    case("broadcast")(build_broadcast)

    def build_neg():
        a = _t(rng, 5)
        return lambda: ad.neg(a).mean(), [a]
    case("neg")(build_neg)

    def build_matmul():
        a, b = _t(rng, 4, 6), _t(rng, 6, 3)
        return lambda: ad.matmul(a, b).mean(), [a, b]
    case("matmul")(build_matmul)

    def unary(op, lo_=-2.0, hi=2.0, avoid=None, **kw):
        data = np.linspace(lo_, hi, 24).reshape(4, 6)
        if avoid is not None:
            data += avoid
        a = _leaf(data)
        return lambda: op(a, **kw).mean(), [a]

    case("relu")(lambda: unary(ad.relu, avoid=0.1))    # stay off the kink
    case("elu")(lambda: unary(ad.elu, avoid=0.1))
    case("sigmoid")(lambda: unary(ad.sigmoid))
    case("tanh")(lambda: unary(ad.tanh))
    case("softplus")(lambda: unary(ad.softplus))
    case("exp")(lambda: unary(ad.exp))
    case("log")(lambda: unary(ad.log, lo_=0.5, hi=3.0))
    case("square")(lambda: unary(ad.square))
    case("sqrt")(lambda: unary(ad.sqrt, lo_=0.5, hi=3.0))
    case("smooth_l1")(lambda: unary(ad.smooth_l1, avoid=0.15))

    def build_clamp():
        a = _leaf(np.linspace(-2.0, 2.0, 24).reshape(4, 6) + 0.05)
        return lambda: ad.clamp(a, -1.0, 1.0).mean(), [a]
    case("clamp")(build_clamp)

    def build_minimum():
        a, b = _t(rng, 4, 3), _t(rng, 4, 3)
        b.data += 0.3   # keep branches away from exact ties
        return lambda: ad.minimum(a, b).mean(), [a, b]
    case("minimum")(build_minimum)

    def build_maximum():
        a, b = _t(rng, 4, 3), _t(rng, 4, 3)
        b.data += 0.3
        return lambda: ad.maximum(a, b).mean(), [a, b]
    case("maximum")(build_maximum)

    def build_sum_axis():
        a = _t(rng, 3, 4, 2)
        return lambda: ad.tsum(ad.square(a), axis=(0, 2)).mean(), [a]
    case("tsum")(build_sum_axis)

    def build_mean_keep():
        a = _t(rng, 3, 4)
        return lambda: ad.tmean(ad.exp(a), axis=1, keepdims=True).mean(), [a]
    case("tmean")(build_mean_keep)

    def build_norm():
        a = _t(rng, 5, 3)
        a.data += 0.5
        return lambda: ad.norm(a, axis=-1).mean(), [a]
    case("norm")(build_norm)

    def build_reshape():
        a = _t(rng, 4, 6)
        return lambda: ad.square(ad.reshape(a, 3, 8)).mean(), [a]
    case("reshape")(build_reshape)

    def build_concat():
        a, b = _t(rng, 2, 3), _t(rng, 4, 3)
        return lambda: ad.square(ad.concat([a, b], axis=0)).mean(), [a, b]
    case("concat")(build_concat)

    def build_narrow():
        a = _t(rng, 4, 8)
        return lambda: ad.square(ad.narrow(a, 1, 2, 4)).mean(), [a]
    case("narrow")(build_narrow)

    def build_gather():
        a = _t(rng, 6, 3)
        idx = np.array([4, 0, 2, 2, 5])
        return lambda: ad.square(ad.gather_rows(a, idx)).mean(), [a]
    case("gather_rows")(build_gather)

    def build_scale_grad():
        a = _t(rng, 4, 3)
        return lambda: ad.square(ad.scale_grad(a, 1.0)).mean(), [a]
    case("scale_grad")(build_scale_grad)

    def build_conv():
        x = _t(rng, 2, 3, 6, 8)
        w = _leaf(0.3 * rng.standard_normal((4, 3, 3, 3)))
        bias = _t(rng, 4)
        return (lambda: ad.square(
            ad.conv2d(x, w, bias, stride=(2, 2), pad=(1, 1),
                      wrap=True)).mean(), [x, w, bias])
    case("conv2d_wrap")(build_conv)

    def build_conv_plain():
        x = _t(rng, 2, 3, 6, 8)
        w = _leaf(0.3 * rng.standard_normal((4, 3, 3, 3)))
        bias = _t(rng, 4)
        return (lambda: ad.square(
            ad.conv2d(x, w, bias, stride=(1, 1), pad=(1, 1),
                      wrap=False)).mean(), [x, w, bias])
    case("conv2d_zero_pad")(build_conv_plain)

    def build_pool():
        x = _t(rng, 2, 3, 4, 6)
        x.data *= 3.0   # well-separated maxima
        return lambda: ad.square(ad.maxpool2d(x, 2)).mean(), [x]
    case("maxpool2d")(build_pool)

    # world-model composites carry custom vjps; cover them here too
    def build_clamp_norm():
        a = _t(rng, 5, 3)
        a.data *= 2.0
        return lambda: ad.square(wd.clamp_norm(a, 1.5)).mean(), [a]
    case("clamp_norm")(build_clamp_norm)

    def build_dynamics():
        a, v = _t(rng, 5, 3), _t(rng, 5, 3)
        xi = 0.1 * rng.standard_normal((5, 3))
        return (lambda: ad.square(
            wd.apply_dynamics(a, v, xi, 0.3)).mean(), [a, v])
    case("apply_dynamics")(build_dynamics)

    def build_integrate():
        p, v = _t(rng, 4, 3), _t(rng, 4, 3)
        a0, a1 = _t(rng, 4, 3), _t(rng, 4, 3)
        def fn():
            pn, vn = wd.integrate_step(p, v, a0, a1, 0.1)
            return ad.add(ad.square(pn).mean(), ad.square(vn).mean())
        return fn, [p, v, a0, a1]
    case("integrate_step")(build_integrate)

    def build_rotate():
        a = _t(rng, 5, 3)
        R = wd.yaw_frames_from_velocity(
            rng.standard_normal((5, 3)), np.tile(np.eye(3), (5, 1, 1)), 0.0)
        return lambda: ad.square(wd.rotate_rows(R, a)).mean(), [a]
    case("rotate_rows")(build_rotate)

    return cases


def loss_cases(seed=1):
    rng = np.random.default_rng(seed)
    cases = []

    def build_velocity():
        v_bar = _t(rng, 6, 3)
        v_star = rng.standard_normal((6, 3))
        return lambda: lo.loss_velocity(v_bar, v_star).mean(), [v_bar]
    cases.append(("loss_velocity", build_velocity))

    def build_vel_pred():
        v_hat = _t(rng, 6, 3)
        v_true = rng.standard_normal((6, 3))
        return lambda: lo.loss_vel_pred(v_hat, v_true).mean(), [v_hat]
    cases.append(("loss_vel_pred", build_vel_pred))

    def build_collision():
        d = _leaf(rng.uniform(0.2, 2.0, 6))
        v_app = _leaf(rng.uniform(0.1, 2.0, 6))
        return lambda: lo.loss_collision(d, v_app).mean(), [d, v_app]
    cases.append(("loss_collision", build_collision))

    def build_obstacle():
        d = _leaf(rng.uniform(0.2, 2.0, 6))
        v_app = _leaf(rng.uniform(0.1, 2.0, 6))
        return lambda: lo.loss_obstacle(d, v_app).mean(), [d, v_app]
    cases.append(("loss_obstacle", build_obstacle))

    def build_acc():
        a = _t(rng, 6, 3)
        return lambda: lo.loss_acc(a).mean(), [a]
    cases.append(("loss_acc", build_acc))

    def build_jerk():
        a, a_prev = _t(rng, 6, 3), _t(rng, 6, 3)
        return lambda: lo.loss_jerk(a, a_prev, 0.1).mean(), [a, a_prev]
    cases.append(("loss_jerk", build_jerk))

    def build_approach():
        pa, va = _t(rng, 6, 3), _t(rng, 6, 3)
        pb = rng.standard_normal((6, 3)) + 2.0
        vb = rng.standard_normal((6, 3))
        return (lambda: lo.approach_speed(
            pa, va, pb, vb).mean(), [pa, va])
    cases.append(("approach_speed", build_approach))

    def build_window():
        xs = [_t(rng, 4, 3) for _ in range(5)]
        def fn():
            win = lo.VelocityWindow(3)
            for x in xs:
                win.push(x)
            return ad.square(win.mean()).mean()
        return fn, xs
    cases.append(("velocity_window", build_window))

    def build_total():
        terms = {name: _t(rng) for name in lo.TERM_NAMES}
        w = lo.LossWeights()
        return (lambda: lo.total_step_loss(terms, w),
                list(terms.values()))
    cases.append(("total_step_loss", build_total))

    return cases


def run_suite(cases, tol=OP_TOL, verbose=False):
    results = []
    for name, build in cases:
        fn, wrt = build()
        err = ad.grad_check(fn, wrt)
        ok = err < tol
        results.append((name, err, tol, ok))
        if verbose:
            print(f"  {name:18s} rel_err {err:.3e}  "
                  f"{'ok' if ok else 'FAIL'}")
    return results


def check_ops(verbose=False):
    return run_suite(op_cases(), OP_TOL, verbose)


def check_losses(verbose=False):
    return run_suite(loss_cases(), OP_TOL, verbose)


def rollout_case(agents=4, T=16, seed=3):
    """Small end-to-end loss as a pure function of the policy parameters.

    Runs once to record every gradient-constant input (observations, yaw
    frames, velocity targets, disturbances), then replays those records so
    finite differences probe exactly the differentiated computation.
    Gradient decay is disabled: with decay on, the tape gradient is the
    attenuated one by design and is checked separately.
    """
    rig = CameraRig(width=16, height=16)
    pano = PanoramaConfig(width=32, height=8)
    prep = PreprocessConfig(pool=2, noise_std=0.0)
    obs = ro.ObsSettings(rig=rig, pano=pano, prep=prep)
    h, w = obs.input_shape()
    arch = pol.ArchConfig(in_height=h, in_width=w, channels=(4, 8, 8, 8),
                          strides=((1, 2), (2, 2), (2, 2), (1, 1)),
                          d_z=16, d_h=16)
    params = pol.init_params(seed, arch, dtype=np.float64, verbose=False)
    scen = make_circle_swap(agents, 2.5, 0.5, 1.5, seed=seed)
    envs = ro.EnvBatch([scen], wd.DynamicsConfig())
    weights = lo.LossWeights()

    first = ro.rollout(params, envs, T, obs, weights, seed=(seed,),
                       gamma_g=1.0, record_frozen=True)
    frozen = first.frozen

    def fn():
        res = ro.rollout(params, envs, T, obs, weights, seed=(seed,),
                         gamma_g=1.0, frozen=frozen)
        return res.total

    return fn, list(params.values())


def check_rollout(n_dirs=8, coords_per_tensor=2, verbose=False):
    """Directional probes over all parameters jointly, plus a few exact
    per-coordinate probes on every parameter tensor."""
    fn, wrt = rollout_case()
    results = []
    err_dir = ad.grad_check_directional(fn, wrt, n_dirs=n_dirs)
    results.append(("rollout_directional", err_dir, ROLLOUT_TOL,
                    err_dir < ROLLOUT_TOL))
    err_coord = ad.grad_check(fn, wrt, eps=1e-6,
                              max_coords=coords_per_tensor,
                              rng=np.random.default_rng(7))
    results.append(("rollout_coordinates", err_coord, ROLLOUT_TOL,
                    err_coord < ROLLOUT_TOL))
    if verbose:
        for name, err, tol, ok in results:
            print(f"  {name:20s} rel_err {err:.3e}  "
                  f"{'ok' if ok else 'FAIL'}")
    return results

"""Batched environment state and the differentiable rollout loop."""

import numpy as np
import pytest

from panonav import autodiff as ad
from panonav import world as wd
from panonav.errors import ConfigError
from panonav.losses import LossWeights
from panonav.perception import CAMERA_NAMES, preprocess
from panonav.policy import ArchConfig, init_params
from panonav.rollout import EnvBatch, ObsSettings, render_observations, rollout
from panonav.scenario import make_circle_swap, make_dispersal


@pytest.fixture
def envs(dyn):
    scens = [make_circle_swap(3, 2.5, 0.5, 1.5, seed=s) for s in (0, 1)]
    return EnvBatch(scens, dyn)


@pytest.fixture
def tiny_params(tiny_arch):
    return init_params(0, tiny_arch, verbose=False)


def test_env_batch_stacking(envs):
    assert (envs.E, envs.A, envs.B) == (2, 3, 6)
    assert envs.starts.shape == (6, 3)
    assert envs.goals.shape == (6, 3)
    assert envs.v_max.shape == (6,)
    # rows are env-major: env 0 first, then env 1
    np.testing.assert_array_equal(envs.starts[:3], envs.scenarios[0].starts)
    np.testing.assert_array_equal(envs.starts[3:], envs.scenarios[1].starts)
    assert len(envs.spheres) == 2
    for sph, s in zip(envs.spheres, envs.scenarios):
        assert sph.shape == (s.n_obstacles, 4)


def test_env_batch_rejects_mixed_agent_counts(dyn):
    scens = [make_circle_swap(3, 2.5, 0.5, 1.5, seed=0),
             make_circle_swap(4, 2.5, 0.5, 1.5, seed=1)]
    with pytest.raises(ConfigError):
        EnvBatch(scens, dyn)


def test_initial_frames_face_goals(envs):
    F = envs.initial_frames()
    head = envs.goals - envs.starts
    head[:, 2] = 0.0
    head /= np.linalg.norm(head, axis=1, keepdims=True)
    np.testing.assert_allclose(F[:, :, 0], head, atol=1e-12)
    # proper rotations
    np.testing.assert_allclose(np.linalg.det(F), 1.0, atol=1e-12)


def test_clearances_and_violations_match_world(envs):
    p = envs.starts + 0.1
    mc = envs.min_clearances(p)
    vi = envs.violations(p)
    for e in range(envs.E):
        P = p[e * envs.A:(e + 1) * envs.A]
        sph = envs.spheres[e]
        c = wd.agent_clearances(P, envs.dyn.agent_radius,
                                envs.dyn.margin).min(axis=1)
        if sph.shape[0]:
            oc = wd.obstacle_clearances(P, sph[:, :3], sph[:, 3],
                                        envs.dyn.agent_radius,
                                        envs.dyn.margin).min(axis=1)
            c = np.minimum(c, oc)
        np.testing.assert_allclose(mc[e * envs.A:(e + 1) * envs.A], c)
        np.testing.assert_array_equal(vi[e * envs.A:(e + 1) * envs.A], c < 0)


def test_violations_fire_when_agents_touch(dyn):
    s = make_dispersal(2, 0.1, 3.0, 0, 1.0, seed=0)
    envs = EnvBatch([s], dyn)
    # 0.2 m apart is inside 2*r_a + margin
    assert envs.violations(envs.starts).all()


def test_render_observation_shapes(envs, tiny_obs):
    F = envs.initial_frames()
    x = render_observations(envs.starts, F, envs, tiny_obs)
    assert x.shape == (envs.B,) + tiny_obs.input_shape()
    assert np.isfinite(x).all()


def test_render_forward_mode(envs, tiny_rig, tiny_prep):
    obs = ObsSettings(rig=tiny_rig, prep=tiny_prep, mode="forward")
    F = envs.initial_frames()
    x = render_observations(envs.starts, F, envs, obs)
    assert x.shape == (envs.B,) + obs.input_shape()
    assert obs.input_shape() == (tiny_rig.height // tiny_prep.pool,
                                 tiny_rig.width // tiny_prep.pool)


def test_all_cameras_failed_gives_flat_far_panorama(envs, tiny_rig, tiny_pano,
                                                    tiny_prep):
    obs = ObsSettings(rig=tiny_rig, pano=tiny_pano, prep=tiny_prep,
                      failed=tuple(CAMERA_NAMES))
    F = envs.initial_frames()
    x = render_observations(envs.starts, F, envs, obs)
    flat = np.full((tiny_pano.height, tiny_pano.width), obs.d_far)
    expect = preprocess(flat, tiny_prep)
    for b in range(envs.B):
        np.testing.assert_allclose(x[b], expect, atol=1e-12)


def test_failed_by_index_matches_failed_by_name(envs, tiny_rig, tiny_pano,
                                                tiny_prep):
    F = envs.initial_frames()
    by_name = render_observations(
        envs.starts, F, envs,
        ObsSettings(rig=tiny_rig, pano=tiny_pano, prep=tiny_prep,
                    failed=("left",)))
    by_idx = render_observations(
        envs.starts, F, envs,
        ObsSettings(rig=tiny_rig, pano=tiny_pano, prep=tiny_prep,
                    failed=(CAMERA_NAMES["left"],)))
    np.testing.assert_array_equal(by_name, by_idx)


def test_rollout_shape_guard(envs, tiny_obs):
    bad = init_params(0, ArchConfig(in_height=8, in_width=16,
                                    channels=(4, 4, 4, 4),
                                    strides=((1, 2), (2, 2), (2, 2), (1, 1)),
                                    d_z=8, d_h=8), verbose=False)
    with pytest.raises(ConfigError, match="does not match"):
        rollout(bad, envs, 2, tiny_obs, LossWeights(), seed=0)


def test_rollout_runs_and_reports(dyn, tiny_obs, tiny_params):
    scens = [make_dispersal(3, 1.0, 4.0, 2, 1.0, seed=s) for s in (0, 1)]
    envs = EnvBatch(scens, dyn)
    res = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=0)
    assert res.total.data.shape == ()
    assert np.isfinite(res.total.data)
    assert set(res.terms) == {"v", "v_hat", "col", "obj", "acc", "jerk"}
    for name in ("success", "ar", "speed", "ground_affinity", "snap"):
        assert np.isfinite(res.diag[name])
    assert 0.0 <= res.diag["success"] <= 1.0
    assert res.frozen is None and res.positions is None


def test_rollout_single_agent_drops_pair_term(dyn, tiny_obs, tiny_params):
    envs = EnvBatch([make_dispersal(1, 0.3, 4.0, 2, 1.0, seed=0)], dyn)
    res = rollout(tiny_params, envs, 3, tiny_obs, LossWeights(), seed=0)
    assert "col" not in res.terms
    assert "obj" in res.terms


def test_rollout_seed_determinism(envs, tiny_obs, tiny_params):
    a = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=7)
    b = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=7)
    c = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=8)
    assert a.total.data == b.total.data
    assert a.total.data != c.total.data


def test_rollout_keep_positions(envs, tiny_obs, tiny_params):
    res = rollout(tiny_params, envs, 5, tiny_obs, LossWeights(), seed=0,
                  keep_positions=True)
    assert res.positions.shape == (6, envs.B, 3)
    np.testing.assert_array_equal(res.positions[0], envs.starts)
    # agents actually move
    assert np.abs(res.positions[-1] - res.positions[0]).max() > 0.0


def test_frozen_replay_reproduces_loss(envs, tiny_obs, tiny_params):
    rec = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=3,
                  record_frozen=True)
    assert len(rec.frozen) == 4
    rep = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=3,
                  frozen=rec.frozen)
    assert rep.total.data == rec.total.data
    for name in rec.terms:
        assert rep.terms[name].data == rec.terms[name].data


def test_rollout_backward_produces_grads(envs, tiny_obs, tiny_params):
    with ad.Tape() as tape:
        res = rollout(tiny_params, envs, 4, tiny_obs, LossWeights(), seed=0)
        tape.backward(res.total)
    g = tiny_params.flat_grad()
    assert np.isfinite(g).all()
    assert np.abs(g).max() > 0.0

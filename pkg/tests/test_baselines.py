"""Potential-field and dynamic-window controllers."""

import numpy as np
import pytest

from panonav.baselines import (BaselineConfig, apf_step, dwa_candidates,
                               dwa_step, privileged_observation)
from panonav.errors import ConfigError


@pytest.fixture
def cfg():
    return BaselineConfig()


def free_obs(p=(0.0, 0.0, 1.5), v=(0.0, 0.0, 0.0)):
    return privileged_observation(
        np.array([p]), np.array([v]), 0, np.zeros((0, 3)), np.zeros(0),
        BaselineConfig())


def test_config_validation(cfg):
    cfg.validate()
    with pytest.raises(ConfigError):
        BaselineConfig(n_directions=0).validate()
    with pytest.raises(ConfigError):
        BaselineConfig(k_rep=-1.0).validate()


def test_privileged_observation_filters_by_radius(cfg):
    p = np.array([[0.0, 0, 1.5], [3.0, 0, 1.5], [50.0, 0, 1.5]])
    v = np.array([[1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]])
    oc = np.array([[5.0, 0, 1.5], [40.0, 0, 1.5]])
    orr = np.array([1.0, 20.0])
    obs = privileged_observation(p, v, 0, oc, orr, cfg)
    # self removed, far agent removed
    np.testing.assert_array_equal(obs.neighbors_rel_p, [[3.0, 0, 0]])
    np.testing.assert_array_equal(obs.neighbors_rel_v, [[-1.0, 1, 0]])
    # the far obstacle's *surface* is within range thanks to its radius
    assert obs.obstacle_centers.shape == (2, 3)
    np.testing.assert_array_equal(obs.p, p[0])
    np.testing.assert_array_equal(obs.v, v[0])


def test_privileged_observation_exclude_mask(cfg):
    p = np.array([[0.0, 0, 1.5], [3.0, 0, 1.5], [0.0, 3, 1.5]])
    v = np.zeros((3, 3))
    obs = privileged_observation(p, v, 0, np.zeros((0, 3)), np.zeros(0), cfg,
                                 exclude=[False, True, False])
    np.testing.assert_array_equal(obs.neighbors_rel_p, [[0.0, 3, 0]])


def test_apf_free_space_settles_at_internal_speed(cfg):
    # attraction alone commands k_att * internal_speed toward a far goal;
    # against drag k_att the equilibrium speed is exactly internal_speed
    a = apf_step(free_obs(), np.array([100.0, 0, 1.5]), cfg)
    np.testing.assert_allclose(a, [cfg.k_att * cfg.internal_speed, 0, 0],
                               atol=1e-12)
    assert cfg.k_att * cfg.internal_speed / cfg.drag \
        == pytest.approx(cfg.internal_speed)


def test_apf_near_goal_proportional(cfg):
    a = apf_step(free_obs(), np.array([0.5, 0.0, 1.5]), cfg)
    np.testing.assert_allclose(a, [cfg.k_att * 0.5, 0, 0], atol=1e-12)


def test_apf_repulsion_points_away_and_grows(cfg):
    goal = np.array([100.0, 0, 1.5])

    def accel_with_obstacle(x):
        obs = privileged_observation(
            np.array([[0.0, 0, 1.5]]), np.zeros((1, 3)), 0,
            np.array([[x, 0.0, 1.5]]), np.array([0.5]), cfg)
        return apf_step(obs, goal, cfg)

    free = apf_step(free_obs(), goal, cfg)
    far = accel_with_obstacle(10.0)       # clearance outside d_influence
    near = accel_with_obstacle(2.0)
    nearer = accel_with_obstacle(1.2)
    np.testing.assert_array_equal(far, free)
    assert near[0] < free[0]              # pushed back along -x
    assert nearer[0] < near[0]
    assert near[1] == near[2] == 0.0


def test_apf_clamps_to_a_max(cfg):
    obs = privileged_observation(
        np.array([[0.0, 0, 1.5], [0.31, 0.0, 1.5]]), np.zeros((2, 3)), 0,
        np.zeros((0, 3)), np.zeros(0), cfg)
    a = apf_step(obs, np.array([100.0, 0, 1.5]), cfg)
    assert np.linalg.norm(a) == pytest.approx(cfg.a_max)


def test_dwa_candidate_grid(cfg):
    cands = dwa_candidates(cfg)
    assert cands.shape == (cfg.n_directions * cfg.n_magnitudes, 3)
    assert (cands[:, 2] == 0.0).all()
    mags = np.linalg.norm(cands, axis=1)
    expect = cfg.cand_accel * np.arange(1, cfg.n_magnitudes + 1) \
        / cfg.n_magnitudes
    np.testing.assert_allclose(np.unique(np.round(mags, 12)),
                               np.round(expect, 12))
    # direction-major: first n_magnitudes rows all point along +x
    np.testing.assert_allclose(cands[:cfg.n_magnitudes, 1], 0.0, atol=1e-12)
    np.testing.assert_allclose(cands[0], [cfg.cand_accel / cfg.n_magnitudes,
                                          0.0, 0.0], atol=1e-12)


def test_dwa_free_space_heads_for_goal(cfg):
    a = dwa_step(free_obs(), np.array([20.0, 0, 1.5]), cfg)
    assert a[0] > 0.0
    assert abs(a[1]) < 1e-9


def test_dwa_vertical_servo(cfg):
    a_up = dwa_step(free_obs(), np.array([20.0, 0, 4.0]), cfg)
    a_dn = dwa_step(free_obs(), np.array([20.0, 0, 0.5]), cfg)
    assert a_up[2] > 0.0 > a_dn[2]
    # damping opposes vertical rate at level goal
    a_damp = dwa_step(free_obs(v=(0.0, 0, 1.0)), np.array([20.0, 0, 1.5]),
                      cfg)
    assert a_damp[2] < 0.0


def test_dwa_swerves_around_blocker(cfg):
    obs = privileged_observation(
        np.array([[0.0, 0, 1.5]]), np.zeros((1, 3)), 0,
        np.array([[1.5, 0.0, 1.5]]), np.array([0.8]), cfg)
    a = dwa_step(obs, np.array([20.0, 0, 1.5]), cfg)
    free = dwa_step(free_obs(), np.array([20.0, 0, 1.5]), cfg)
    assert not np.allclose(a, free)
    assert abs(a[1]) > 0.0     # lateral component to clear the blocker


def test_dwa_all_collided_brakes(cfg):
    # an obstacle the agent is already inside makes every candidate collide
    obs = privileged_observation(
        np.array([[0.0, 0, 1.5]]), np.array([[2.0, 0, 0]]), 0,
        np.array([[0.0, 0.0, 1.5]]), np.array([3.0]), cfg)
    a = dwa_step(obs, np.array([20.0, 0, 1.5]), cfg)
    np.testing.assert_allclose(a, [-cfg.a_max, 0, 0], atol=1e-12)
    # at rest there is nothing to brake
    obs0 = privileged_observation(
        np.array([[0.0, 0, 1.5]]), np.zeros((1, 3)), 0,
        np.array([[0.0, 0.0, 1.5]]), np.array([3.0]), cfg)
    np.testing.assert_allclose(dwa_step(obs0, np.array([20.0, 0, 1.5]), cfg),
                               0.0, atol=1e-12)


def test_controllers_deterministic(cfg):
    p = np.array([[0.0, 0, 1.5], [2.0, 0.5, 1.5]])
    v = np.array([[0.5, 0, 0], [-0.5, 0, 0]])
    oc, orr = np.array([[1.0, -1.0, 1.5]]), np.array([0.4])
    goal = np.array([10.0, 0, 1.5])
    obs = privileged_observation(p, v, 0, oc, orr, cfg)
    obs2 = privileged_observation(p, v, 0, oc, orr, cfg)
    np.testing.assert_array_equal(apf_step(obs, goal, cfg),
                                  apf_step(obs2, goal, cfg))
    np.testing.assert_array_equal(dwa_step(obs, goal, cfg),
                                  dwa_step(obs2, goal, cfg))

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgtd.mdp_env import (
    CartPoleParams,
    CartPoleState,
    TabularMDP,
    build_grid_world,
    build_random_mdp,
    cartpole_failed,
    cartpole_reset,
    cartpole_step,
    deterministic_policy,
    perturb_policy,
    sample_iid_batch,
    sample_stream,
    stationary_distribution,
    uniform_policy,
    value_iteration,
)


def eigen_stationary(P):
    vals, vecs = np.linalg.eig(P.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    return v / v.sum()


# -- TabularMDP


def test_mdp_validation():
    P = np.ones((2, 1, 2)) / 2
    with pytest.raises(ValueError):
        TabularMDP(P, np.zeros((2, 1)), 1.0)
    with pytest.raises(ValueError):
        TabularMDP(P * 1.1, np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(P, np.zeros((2, 2)), 0.9)
    with pytest.raises(ValueError):
        TabularMDP(P, np.array([[0.0], [np.inf]]), 0.9)


def test_mdp_json_roundtrip():
    mdp = build_random_mdp(3, 2, seed=1)
    back = TabularMDP.from_json(mdp.to_json())
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.gamma == mdp.gamma
    assert json.loads(mdp.to_json())["gamma"] == 0.9


# -- grid world


def test_grid_world_1x2_by_hand():
    mdp = build_grid_world(2, 1, goal=1, step_reward=-1.0, goal_reward=5.0)
    assert mdp.n_states == 2 and mdp.n_actions == 4
    # actions: up, down, left, right. from cell 0 only "right" reaches the goal
    expected0 = np.array([[1, 0], [1, 0], [1, 0], [0, 1]], dtype=float)
    np.testing.assert_array_equal(mdp.transition[0], expected0)
    np.testing.assert_array_equal(mdp.transition[1], np.tile([0.0, 1.0], (4, 1)))
    np.testing.assert_array_equal(mdp.reward[0], [-1, -1, -1, 5])
    np.testing.assert_array_equal(mdp.reward[1], [0, 0, 0, 0])


def test_grid_world_4x4_one_hot_rows():
    mdp = build_grid_world(4, 4)
    assert mdp.transition.shape == (16, 4, 16)
    assert np.all(np.sort(mdp.transition, axis=2)[:, :, -1] == 1.0)


def test_grid_world_restart_goal():
    mdp = build_grid_world(3, 3, goal=(2, 2), goal_mode="restart", start=0)
    np.testing.assert_array_equal(mdp.transition[8, :, 0], np.ones(4))


@pytest.mark.parametrize("goal", [16, -1, (4, 0), (0, 4)])
def test_grid_world_goal_outside(goal):
    with pytest.raises(ValueError):
        build_grid_world(4, 4, goal=goal)


def test_grid_world_stationary_sums_to_one_against_power_iteration():
    mdp = build_grid_world(4, 4)
    pi = uniform_policy(mdp)
    d = stationary_distribution(mdp, pi)
    assert np.all(d >= 0) and d.sum() == pytest.approx(1.0, abs=1e-12)
    P = 0.999999 * mdp.state_transition(pi) + 1e-6 / 16
    v = np.full(16, 1 / 16)
    for _ in range(200_000):
        v = v @ P
    np.testing.assert_allclose(d, v, atol=1e-6)


# -- random MDPs


def test_random_mdp_reproducible():
    a, b = build_random_mdp(4, 3, seed=5), build_random_mdp(4, 3, seed=5)
    np.testing.assert_array_equal(a.transition, b.transition)
    np.testing.assert_array_equal(a.reward, b.reward)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 10_000))
def test_random_mdp_stochastic(n, k, seed):
    mdp = build_random_mdp(n, k, seed=seed)
    assert np.all(np.abs(mdp.transition.sum(axis=2) - 1) <= 1e-12)
    assert np.all((mdp.reward >= 0) & (mdp.reward <= 1))


def test_random_mdp_stationary_matches_eigen_solve():
    mdp = build_random_mdp(3, 2, seed=3)
    pi = uniform_policy(mdp)
    d = stationary_distribution(mdp, pi, teleport=0.0)
    np.testing.assert_allclose(d, eigen_stationary(mdp.state_transition(pi)), atol=1e-12)


def test_symmetric_chain_stationary():
    P = np.array([[[0.3, 0.7]], [[0.7, 0.3]]])
    d = stationary_distribution(TabularMDP(P, np.zeros((2, 1)), 0.5), np.ones((2, 1)))
    np.testing.assert_allclose(d, [0.5, 0.5], atol=1e-12)


def test_stationary_residual_within_tolerance():
    mdp = build_random_mdp(6, 3, seed=8)
    pi = uniform_policy(mdp)
    d = stationary_distribution(mdp, pi)
    P = 0.999999 * mdp.state_transition(pi) + 1e-6 / 6
    assert np.sum(np.abs(d @ P - d)) <= 1e-10


# -- value iteration


def test_value_iteration_zero_rewards():
    mdp = build_random_mdp(3, 2, seed=0)
    Q, pi = value_iteration(TabularMDP(mdp.transition, np.zeros((3, 2)), 0.9))
    assert np.all(Q == 0)
    np.testing.assert_array_equal(pi[:, 0], 1.0)  # ties go to action 0


def test_value_iteration_geometric_series():
    Q, _ = value_iteration(TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9), tol=1e-12)
    assert Q[0, 0] == pytest.approx(10.0, abs=1e-10)


def test_value_iteration_residual_and_validation():
    mdp = build_random_mdp(5, 3, seed=2)
    Q, _ = value_iteration(mdp, tol=1e-9)
    assert np.max(np.abs(mdp.reward + mdp.gamma * mdp.transition @ Q.max(axis=1) - Q)) <= 1e-8
    with pytest.raises(ValueError):
        value_iteration(mdp, tol=0.0)


def test_value_iteration_matches_policy_enumeration_2x2():
    mdp = build_grid_world(2, 2, goal=3, step_reward=-0.1, goal_reward=1.0, gamma=0.9)
    Q, pi = value_iteration(mdp, tol=1e-12)
    best = np.full(4, -np.inf)
    for actions in itertools.product(range(4), repeat=4):
        p = deterministic_policy(actions, 4)
        v = np.linalg.solve(np.eye(4) - 0.9 * mdp.state_transition(p), mdp.expected_reward(p))
        best = np.maximum(best, v)
    np.testing.assert_allclose(Q.max(axis=1), best, atol=1e-9)
    v_pi = np.linalg.solve(np.eye(4) - 0.9 * mdp.state_transition(pi), mdp.expected_reward(pi))
    np.testing.assert_allclose(v_pi, best, atol=1e-9)


# -- perturb_policy


def test_perturb_policy_examples():
    pi = deterministic_policy([0, 2, 3], 4)
    np.testing.assert_array_equal(perturb_policy(pi, 0.0), pi)
    np.testing.assert_allclose(perturb_policy(pi, 1.0), np.full((3, 4), 0.25))
    assert perturb_policy(pi, 0.05)[1, 2] == pytest.approx(0.9625)
    with pytest.raises(ValueError):
        perturb_policy(pi, 1.5)


# -- sampling


def test_iid_stream_frequencies_within_3_sigma():
    mdp = build_random_mdp(3, 2, seed=4)
    pi = uniform_policy(mdp)
    d = stationary_distribution(mdp, pi)
    n = 1_000_000
    s, _, _ = sample_iid_batch(mdp, pi, d, n, np.random.default_rng(0))
    freq = np.bincount(s, minlength=3) / n
    assert np.all(np.abs(freq - d) <= 3 * np.sqrt(d * (1 - d) / n))


def test_iid_stream_generator_matches_stationary():
    mdp = build_random_mdp(3, 2, seed=4)
    pi = uniform_policy(mdp)
    d = stationary_distribution(mdp, pi)
    n = 100_000
    stream = sample_stream(mdp, pi, mode="iid", seed=1)
    freq = np.bincount([next(stream).s for _ in range(n)], minlength=3) / n
    assert np.all(np.abs(freq - d) <= 3 * np.sqrt(d * (1 - d) / n))


def test_stream_is_reproducible():
    mdp = build_random_mdp(4, 2, seed=0)
    pi = uniform_policy(mdp)
    for mode in ("iid", "trajectory"):
        a = sample_stream(mdp, pi, mode=mode, seed=3)
        b = sample_stream(mdp, pi, mode=mode, seed=3)
        assert [next(a) for _ in range(200)] == [next(b) for _ in range(200)]


def test_trajectory_follows_chain_on_policy():
    mdp = build_grid_world(3, 3)
    pi = uniform_policy(mdp)
    stream = sample_stream(mdp, pi, seed=0, teleport=0.0)
    prev = next(stream)
    for _ in range(100):
        t = next(stream)
        assert t.s == prev.s_next
        assert mdp.transition[t.s, t.a, t.s_next] == 1.0
        prev = t


def test_trajectory_on_absorbing_mdp_never_stalls():
    mdp = build_grid_world(3, 3, goal_mode="absorbing")
    stream = sample_stream(mdp, uniform_policy(mdp), seed=2, teleport=0.01, burn_in=10)
    states = {next(stream).s for _ in range(20_000)}
    assert len(states) == 9


def test_off_policy_stream_uses_target_actions():
    mdp = build_random_mdp(3, 2, seed=1)
    behavior = uniform_policy(mdp)
    target = deterministic_policy([1, 1, 1], 2)
    stream = sample_stream(mdp, behavior, seed=0, target=target)
    for _ in range(200):
        t = next(stream)
        assert t.a == 1 and t.a_next == 1


def test_unknown_stream_mode():
    mdp = build_random_mdp(2, 1, seed=0)
    with pytest.raises(ValueError):
        next(sample_stream(mdp, uniform_policy(mdp), mode="batch"))


# -- cart-pole


def mirror(s):
    return CartPoleState(-s.x, -s.x_dot, -s.theta, -s.theta_dot, s.steps)


def test_cartpole_mirror_symmetry():
    rng = np.random.default_rng(0)
    a = b = CartPoleState(0.01, -0.02, 0.03, 0.01)
    b = mirror(a)
    for action in rng.integers(0, 2, 50):
        a, _, _ = cartpole_step(a, int(action))
        b, _, _ = cartpole_step(b, 1 - int(action))
        np.testing.assert_allclose(b.as_array(), -a.as_array(), atol=1e-14)


def test_cartpole_unforced_pole_falls():
    params = CartPoleParams(force=0.0)
    s = CartPoleState(0.0, 0.0, 0.01, 0.0)
    angles = []
    for _ in range(10):
        s, r, _ = cartpole_step(s, 1, params)
        angles.append(s.theta)
        assert r == 1.0
    assert np.all(np.diff(angles) > 0)


def test_cartpole_termination_rules():
    s, _, done = cartpole_step(CartPoleState(0, 0, 0.25, 0), 0)
    assert done and cartpole_failed(s)
    s, _, done = cartpole_step(CartPoleState(2.45, 0, 0, 0), 0)
    assert done and cartpole_failed(s)
    params = CartPoleParams.v0()
    s, _, done = cartpole_step(CartPoleState(0, 0, 0, 0, steps=199), 0, params)
    assert done and not cartpole_failed(s, params)
    assert CartPoleParams.v1().max_steps == 500
    with pytest.raises(ValueError):
        cartpole_step(CartPoleState(0, 0, 0, 0), 2)


def test_cartpole_episode_deterministic():
    def episode(seed):
        rng = np.random.default_rng(seed)
        s, done, traj = cartpole_reset(rng), False, []
        while not done:
            s, _, done = cartpole_step(s, int(s.theta > 0))
            traj.append(s.as_array())
        return np.array(traj)

    np.testing.assert_array_equal(episode(4), episode(4))

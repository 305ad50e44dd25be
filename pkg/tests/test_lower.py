import math

import numpy as np
import pytest

from bisirl.envs import random_environment
from bisirl.game import DemoSet, JointPolicy, MarkovGame, sample_trajectories
from bisirl.lower import (
    LowerConfig,
    LowerProblem,
    demo_log_likelihood,
    inner_loop,
    lower_grad_e,
    lower_grad_l,
    lower_loss,
)
from bisirl.reward import RewardModel
from bisirl.soft import solve_soft

from conftest import chain_game


def env_and_demos(seed, n_states=4, features="linear", d=20):
    rng = np.random.default_rng(seed)
    env = random_environment(n_states, 2, 2, 4, 0.9, rng, features=features)
    demos = sample_trajectories(env.game, solve_soft(env.game, env.r_l, env.r_e).policy, d, rng)
    return env, demos, rng


def central_fd(fn, x, eps=1e-5):
    return np.array([(fn(x + eps * e) - fn(x - eps * e)) / (2 * eps) for e in np.eye(x.size)])


def uniform_game(horizon):
    return MarkovGame(np.ones((1, 2, 2, 1)), horizon, 1.0, np.array([1.0]))


def test_uniform_likelihood_value():
    game = uniform_game(3)
    model = RewardModel.linear(np.zeros((1, 2, 2, 1)))
    demos = DemoSet(np.zeros((1, 3)), np.zeros((1, 3)), np.ones((1, 3)))
    assert lower_loss(game, model, [0.0], model, [0.0], demos, 0.0) == pytest.approx(3 * math.log(4))


def test_zero_norm_regularizer():
    game = uniform_game(2)
    model = RewardModel.linear(np.zeros((1, 2, 2, 2)))
    demos = DemoSet(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)))
    assert lower_loss(game, model, np.zeros(2), model, np.zeros(2), demos, 2.0) == pytest.approx(2 * math.log(4))


def loop_loss(game, r_l, r_e, demos, lam, theta_e):
    """Plain-loop evaluator: per-step softmax value recursion and demo returns."""
    S, A_l, A_e = game.joint_shape
    r = r_l + r_e
    v_next = [0.0] * S
    for _ in range(game.horizon):
        v = []
        for s in range(S):
            total = 0.0
            for al in range(A_l):
                for ae in range(A_e):
                    cont = sum(game.transition[s, al, ae, s2] * v_next[s2] for s2 in range(S))
                    total += math.exp(r[s, al, ae] + game.discount * cont)
            v.append(math.log(total))
        v_next = v
    fitted = 0.0
    for traj in demos.trajectories:
        for h, (s, al, ae) in enumerate(traj.steps):
            fitted += game.discount**h * r[s, al, ae]
    fitted /= demos.d
    partition = sum(game.initial_dist[s] * v_next[s] for s in range(S))
    return partition - fitted + 0.5 * lam * float(np.dot(theta_e, theta_e))


def test_loss_matches_loop_evaluator():
    env, demos, rng = env_and_demos(1, n_states=3)
    tl, te = rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.5
    got = lower_loss(env.game, env.model_l, tl, env.model_e, te, demos, 0.1)
    want = loop_loss(env.game, env.model_l.table(tl), env.model_e.table(te), demos, 0.1, te)
    assert got == pytest.approx(want, abs=1e-10)


def matched_instance():
    game = chain_game(4, 3)
    model_l = RewardModel.linear(np.arange(4.0).reshape(4, 1, 1, 1))
    model_e = RewardModel.linear(np.stack([np.arange(4.0), np.ones(4)], axis=-1).reshape(4, 1, 1, 2))
    demos = sample_trajectories(game, JointPolicy.uniform(game), 2, np.random.default_rng(0))
    return game, model_l, model_e, demos


def test_matched_moments_leave_regularizer():
    game, model_l, model_e, demos = matched_instance()
    g = lower_grad_e(game, model_l, [0.2], model_e, np.array([0.3, -0.4]), demos, 0.1)
    np.testing.assert_allclose(g, [0.03, -0.04], atol=1e-14)
    np.testing.assert_allclose(lower_grad_l(game, model_l, [0.2], model_e, np.array([0.3, -0.4]), demos), 0.0, atol=1e-14)


def test_zero_learner_features_zero_grad_l():
    env, demos, _ = env_and_demos(2)
    model_l = RewardModel.linear(np.zeros((4, 2, 2, 2)))
    g = lower_grad_l(env.game, model_l, np.zeros(2), env.model_e, np.zeros(3), demos)
    np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    env, demos, rng = env_and_demos(seed)
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    tl, te = 0.5 * rng.normal(size=3), 0.5 * rng.normal(size=3)
    g_l, g_e = problem.grads(tl, te)
    fd_e = central_fd(lambda t: problem.loss(tl, t), te)
    fd_l = central_fd(lambda t: problem.loss(t, te), tl)
    assert np.linalg.norm(g_e - fd_e) <= 1e-6 * np.linalg.norm(fd_e)
    assert np.linalg.norm(g_l - fd_l) <= 1e-6 * np.linalg.norm(fd_l)


def test_batch_grads_match_single(rng):
    env, demos, _ = env_and_demos(3)
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    tl, tes = rng.normal(size=3), rng.normal(size=(4, 3))
    g_l, g_e = problem.batch_grads(tl, tes)
    for i, te in enumerate(tes):
        want_l, want_e = problem.grads(tl, te)
        np.testing.assert_allclose(g_l[i], want_l, atol=1e-12)
        np.testing.assert_allclose(g_e[i], want_e, atol=1e-12)


def test_tabular_gradient_monotone():
    env, demos, rng = env_and_demos(4, n_states=3, features="tabular")
    lam = 0.1
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, lam)
    tl = 0.3 * rng.normal(size=12)
    for _ in range(20):
        a, b = rng.normal(size=12), rng.normal(size=12)
        gap = (problem.grad_e(tl, a) - problem.grad_e(tl, b)) @ (a - b)
        assert gap >= lam * np.sum((a - b) ** 2) - 1e-12


def test_zero_step_leaves_theta():
    env, demos, _ = env_and_demos(5)
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    te = np.array([0.1, -0.2, 0.3])
    state = inner_loop(problem, np.zeros(3), te, LowerConfig(step_sizes=0.0), 1)
    np.testing.assert_array_equal(state.theta_e, te)


def test_regularizer_dominated_contraction():
    game, model_l, model_e, demos = matched_instance()
    problem = LowerProblem(game, model_l, model_e, demos, 1.0)
    state = inner_loop(problem, [0.2], np.array([0.6, 0.8]), LowerConfig(lam=1.0, step_sizes=0.05), 20)
    norms = [np.linalg.norm(np.array([0.6, 0.8]) * (1 - 0.05) ** t) for t in range(21)]
    np.testing.assert_allclose(np.linalg.norm(state.theta_e), norms[-1], rtol=1e-12)
    assert np.all(np.diff(state.grad_norm_history) < 0)


def test_inner_loop_reaches_stationarity():
    env, demos, _ = env_and_demos(6)
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    tl = np.zeros(3)
    state = inner_loop(problem, tl, np.zeros(3), LowerConfig(step_sizes=0.1), 500)
    g = problem.grad_e(tl, state.theta_e)
    if np.linalg.norm(state.theta_e) < 1 - 1e-9:
        assert np.linalg.norm(g) < 1e-4
    else:
        nu = max(0.0, -g @ state.theta_e)
        assert np.linalg.norm(g + nu * state.theta_e) < 1e-4
    assert state.loss_history[-1] <= state.loss_history[0]


def test_sampled_inner_loop_needs_rng():
    env, demos, rng = env_and_demos(7)
    problem = LowerProblem(env.game, env.model_l, env.model_e, demos, 0.1)
    config = LowerConfig(exact_expectations=False, mc_rollouts=2000)
    with pytest.raises(ValueError, match="rng"):
        inner_loop(problem, np.zeros(3), np.zeros(3), config, 2)
    sampled = inner_loop(problem, np.zeros(3), np.zeros(3), config, 3, rng)
    exact = inner_loop(problem, np.zeros(3), np.zeros(3), LowerConfig(), 3)
    np.testing.assert_allclose(sampled.theta_e, exact.theta_e, atol=0.05)


def test_empty_demos_rejected():
    env, _, _ = env_and_demos(8)
    empty = DemoSet(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValueError, match="at least one"):
        LowerProblem(env.game, env.model_l, env.model_e, empty, 0.1)


def test_per_step_likelihood_of_uniform_policy():
    game = uniform_game(3)
    sol = solve_soft(game, np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    demos = DemoSet(np.zeros((2, 3)), np.zeros((2, 3)), np.ones((2, 3)))
    assert demo_log_likelihood(game, sol, demos) == pytest.approx(-3 * math.log(4))

"""Monte-Carlo counterparts of the exact occupancy-based evaluators.

These emulate the paper-style sampled estimates and serve as independent
cross-checks of the dynamic-programming results in :mod:`bisirl.soft`.
"""

from __future__ import annotations

import numpy as np

from .game import DemoSet, JointPolicy, MarkovGame, _categorical, check_policy_shape, sample_trajectories
from .reward import RewardModel, as_reward_table


def discounted_feature_sums(demos: DemoSet, model: RewardModel, discount: float) -> np.ndarray:
    """Per-trajectory ``sum_h gamma^h phi(s_h, a_h)``, shape (d, dim)."""
    weights = discount ** np.arange(demos.horizon)
    if model.kind == "tabular":
        flat = np.ravel_multi_index((demos.states, demos.learner_actions, demos.expert_actions), model.shape)
        out = np.zeros((demos.d, model.dim))
        rows = np.repeat(np.arange(demos.d), demos.horizon)
        np.add.at(out, (rows, flat.ravel()), np.tile(weights, demos.d))
        return out
    phi = model.feature_map.values[demos.states, demos.learner_actions, demos.expert_actions]
    return np.einsum("h,dhk->dk", weights, phi)


def empirical_feature_expectation(demos: DemoSet, model: RewardModel, discount: float) -> np.ndarray:
    """``(1/d) sum_i sum_h gamma^h phi(s_ih, a_ih)``."""
    if demos.d == 0:
        raise ValueError("empty demo set")
    return discounted_feature_sums(demos, model, discount).mean(axis=0)


def discounted_returns(demos: DemoSet, reward, discount: float) -> np.ndarray:
    table = np.asarray(as_reward_table(reward))
    r = table[demos.states, demos.learner_actions, demos.expert_actions]
    return r @ (discount ** np.arange(demos.horizon))


def mc_occupancy(game: MarkovGame, policy: JointPolicy, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sampled estimate of the discounted occupancy tensor."""
    demos = sample_trajectories(game, policy, n, rng)
    rho = np.zeros((game.horizon, *game.joint_shape))
    for h in range(game.horizon):
        np.add.at(rho[h], (demos.states[:, h], demos.learner_actions[:, h], demos.expert_actions[:, h]), 1.0)
        rho[h] *= game.discount**h / n
    return rho


def mc_cumulative_reward(game: MarkovGame, policy: JointPolicy, reward, n: int, rng) -> tuple[float, float]:
    """Sample mean of the discounted return and its standard error."""
    returns = discounted_returns(sample_trajectories(game, policy, n, rng), reward, game.discount)
    return float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n))


def sample_from(
    game: MarkovGame,
    policy: JointPolicy,
    h: int,
    s: int,
    a: tuple[int, int] | None,
    n: int,
    rng: np.random.Generator,
) -> DemoSet:
    """Roll out ``n`` episodes from step ``h`` in state ``s``, optionally forcing the first joint action.

    The returned trajectories have length H - h.
    """
    check_policy_shape(game, policy)
    n_ae = game.n_actions_expert
    length = game.horizon - h
    states = np.zeros((n, length), dtype=np.int64)
    al = np.zeros((n, length), dtype=np.int64)
    ae = np.zeros((n, length), dtype=np.int64)
    cur = np.full(n, s, dtype=np.int64)
    for t in range(length):
        states[:, t] = cur
        if t == 0 and a is not None:
            al[:, t], ae[:, t] = a
        else:
            joint = _categorical(policy.table[h + t, cur].reshape(n, -1), rng)
            al[:, t], ae[:, t] = np.divmod(joint, n_ae)
        if t + 1 < length:
            cur = _categorical(game.transition[cur, al[:, t], ae[:, t]], rng)
    return DemoSet(states, al, ae)


def mc_conditional_mu(game, policy, model, h, s, a, n, rng) -> np.ndarray:
    demos = sample_from(game, policy, h, s, a, n, rng)
    return discounted_feature_sums(demos, model, game.discount).mean(axis=0)

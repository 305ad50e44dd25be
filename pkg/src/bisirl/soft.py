"""Exact finite-horizon soft value iteration and discounted occupancy measures.

Every expectation of the form ``E[sum_h gamma^h x(s_h, a_h)]`` is evaluated
exactly: either forward, through the occupancy tensor, or backward, through
:func:`backward_expectation` when conditioning on a state or state-action
pair at some step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .game import GameError, JointPolicy, MarkovGame, check_policy_shape, validate_game
from .reward import RewardModel, as_reward_table


@dataclass(frozen=True)
class SoftSolution:
    """Soft Q and V tables indexed by step, and the joint policy exp(Q - V)."""

    q: np.ndarray  # (H, S, A_l, A_e)
    v: np.ndarray  # (H, S)
    policy: JointPolicy

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "v": self.v.tolist(), "policy": self.policy.table.tolist()}

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class OccupancyMeasure:
    """``rho[h, s, a_l, a_e] = gamma^h * Pr(s_h = s, a_h = (a_l, a_e))``."""

    rho: np.ndarray
    discount: float

    @property
    def horizon(self) -> int:
        return self.rho.shape[0]

    def state_distribution(self) -> np.ndarray:
        """Undiscounted marginal ``Pr(s_h = s)``, shape (H, S)."""
        return self.rho.sum(axis=(2, 3)) / self.discount ** np.arange(self.horizon)[:, None]


def _logsumexp_joint(q: np.ndarray) -> np.ndarray:
    """log-sum-exp over the two trailing action axes, with max subtraction."""
    peak = q.max(axis=(-2, -1))
    return peak + np.log(np.exp(q - peak[..., None, None]).sum(axis=(-2, -1)))


def soft_tables(game: MarkovGame, reward: np.ndarray):
    """Soft value iteration for a stack of joint reward tables.

    ``reward`` has shape (..., S, A_l, A_e); returns ``(q, v, policy)`` with
    shapes (..., H, S, A_l, A_e), (..., H, S) and (..., H, S, A_l, A_e).
    """
    batch = reward.shape[:-3]
    H, S = game.horizon, game.n_states
    q = np.empty((*batch, H, *game.joint_shape))
    v = np.empty((*batch, H, S))
    # (S, A_l, A_e, S') -> (S', S * A_l * A_e) so each backup is one matmul over the batch
    expect = game.transition.reshape(-1, S).T
    v_next = np.zeros((*batch, S))
    for h in range(H - 1, -1, -1):
        q[..., h, :, :, :] = reward + game.discount * (v_next @ expect).reshape(*batch, *game.joint_shape)
        v[..., h, :] = _logsumexp_joint(q[..., h, :, :, :])
        v_next = v[..., h, :]
    table = np.exp(q - v[..., None, None])
    # exp rounding leaves sums within ~1e-15 of one; renormalizing keeps policy == exp(q - v) to ~1e-15
    table /= table.sum(axis=(-2, -1), keepdims=True)
    return q, v, table


def occupancy_tables(game: MarkovGame, policy: np.ndarray) -> np.ndarray:
    """Discounted occupancy for a stack of policy tables of shape (..., H, S, A_l, A_e)."""
    H, S = game.horizon, game.n_states
    rho = np.empty_like(policy)
    flat_p = game.transition.reshape(-1, S)
    state = np.broadcast_to(game.initial_dist, (*policy.shape[:-4], S))
    weight = 1.0
    for h in range(H):
        joint = state[..., None, None] * policy[..., h, :, :, :]
        rho[..., h, :, :, :] = weight * joint
        if h + 1 < H:
            state = joint.reshape(*joint.shape[:-3], -1) @ flat_p
            weight *= game.discount
    return rho


def solve_soft(game: MarkovGame, r_l, r_e, validate: bool = True) -> SoftSolution:
    """Backward soft value iteration with V_H = 0.

    Args:
        game: the Markov game.
        r_l: learner reward, a table (S, A_l, A_e) or a ``(model, theta)`` pair.
        r_e: expert reward, same forms as ``r_l``.
        validate: re-check game invariants first.
    """
    if validate:
        validate_game(game)
    reward = as_reward_table(r_l, game.joint_shape) + as_reward_table(r_e, game.joint_shape)
    q, v, table = soft_tables(game, reward)
    return SoftSolution(q, v, JointPolicy(table))


def occupancy(game: MarkovGame, policy: JointPolicy) -> OccupancyMeasure:
    check_policy_shape(game, policy)
    return OccupancyMeasure(occupancy_tables(game, policy.table), game.discount)


def feature_expectation(occ: OccupancyMeasure, model: RewardModel) -> np.ndarray:
    """Exact discounted feature expectation ``E[sum_h gamma^h phi(s_h, a_h)]``."""
    if occ.rho.shape[1:] != model.shape:
        raise GameError(f"occupancy covers {occ.rho.shape[1:]}, model expects {model.shape}")
    visits = occ.rho.sum(axis=0)
    if model.kind == "tabular":
        return visits.ravel()
    return np.tensordot(visits, model.feature_map.values, axes=3)


def cumulative_reward(occ: OccupancyMeasure, reward) -> float:
    """Exact discounted return of a reward table or ``(model, theta)`` pair."""
    table = as_reward_table(reward, occ.rho.shape[1:])
    return float(np.sum(occ.rho.sum(axis=0) * table))


def backward_expectation(game: MarkovGame, policy: JointPolicy, per_step: np.ndarray):
    """Expected discounted sums of a per-step quantity over the remaining horizon.

    ``per_step`` has shape (S, A_l, A_e, *k). Returns ``(by_action, by_state)``
    with shapes (H, S, A_l, A_e, *k) and (H, S, *k), where
    ``by_action[h, s, a] = E[sum_{t>=h} gamma^(t-h) x_t | s_h = s, a_h = a]`` and
    ``by_state[h, s] = sum_a pi_h(a|s) by_action[h, s, a]``.
    """
    check_policy_shape(game, policy)
    per_step = np.asarray(per_step, dtype=float)
    extra = per_step.shape[3:]
    H, S = game.horizon, game.n_states
    flat = per_step.reshape(*game.joint_shape, -1)
    k = flat.shape[-1]
    by_action = np.empty((H, *game.joint_shape, k))
    by_state = np.empty((H, S, k))
    nxt = np.zeros((S, k))
    for h in range(H - 1, -1, -1):
        by_action[h] = flat + game.discount * (game.transition @ nxt)
        by_state[h] = np.einsum("sxy,sxyk->sk", policy.table[h], by_action[h])
        nxt = by_state[h]
    return by_action.reshape(H, *game.joint_shape, *extra), by_state.reshape(H, S, *extra)


def conditional_mu(
    game: MarkovGame,
    solution: SoftSolution,
    model: RewardModel,
    h: int,
    s: int,
    a: tuple[int, int] | None = None,
) -> np.ndarray:
    """Expected discounted feature sum from step ``h`` onward.

    Conditions on ``s_h = s`` and, if given, on the joint action ``a_h = a``.
    """
    if not 0 <= h < game.horizon or not 0 <= s < game.n_states:
        raise GameError(f"(h={h}, s={s}) out of range")
    by_action, by_state = backward_expectation(game, solution.policy, model.features())
    if a is None:
        return by_state[h, s]
    a_l, a_e = a
    if not (0 <= a_l < game.n_actions_learner and 0 <= a_e < game.n_actions_expert):
        raise GameError(f"joint action {a} out of range")
    return by_action[h, s, a_l, a_e]


def policy_return(game: MarkovGame, policy: JointPolicy, reward) -> float:
    """Discounted return of ``reward`` under ``policy`` from the initial distribution."""
    return cumulative_reward(occupancy(game, policy), reward)

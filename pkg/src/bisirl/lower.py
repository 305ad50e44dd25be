"""Maximum-likelihood IRL for the expert reward given interaction demos.

The loss is the max-ent trajectory negative log-likelihood, normalized by
the number of demonstrations,

    L(tl, te) = -(1/d) sum_i sum_h gamma^h r(s_ih, a_ih) + E_{s0}[V_0(s0)] + (lam/2) |te|^2

with ``r = r_tl + r_te`` and ``V_0`` the soft value. Its gradients are
exactly the moment differences ``mu(pi) - mu_hat`` (plus ``lam * te``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .game import DemoSet, MarkovGame, sample_trajectories
from .montecarlo import empirical_feature_expectation
from .reward import RewardModel, project_ball
from .soft import SoftSolution, feature_expectation, occupancy, occupancy_tables, soft_tables, solve_soft


def _batch_features(visits: np.ndarray, model: RewardModel) -> np.ndarray:
    """Feature expectations for a stack of visitation tables (B, S, A_l, A_e)."""
    if model.kind == "tabular":
        return visits.reshape(visits.shape[0], -1)
    return np.tensordot(visits, model.feature_map.values, axes=([1, 2, 3], [0, 1, 2]))


@dataclass(frozen=True)
class LowerConfig:
    """Inner-loop settings.

    Attributes:
        lam: weight of the ``(lam/2)|theta_e|^2`` regularizer.
        step_sizes: one step size, or a sequence cycled by step index.
        exact_expectations: use occupancy tensors for the model moments;
            otherwise estimate them from ``mc_rollouts`` sampled episodes.
    """

    lam: float = 0.1
    step_sizes: float | tuple[float, ...] = 0.1
    exact_expectations: bool = True
    mc_rollouts: int = 1000

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lam must be positive, got {self.lam}")
        steps = self.step_sizes if isinstance(self.step_sizes, tuple) else (self.step_sizes,)
        if not steps or any(not b >= 0 for b in steps):
            raise ValueError(f"step sizes must be non-negative, got {self.step_sizes}")

    def beta(self, t: int) -> float:
        if isinstance(self.step_sizes, tuple):
            return float(self.step_sizes[t % len(self.step_sizes)])
        return float(self.step_sizes)


@dataclass
class LowerState:
    theta_e: np.ndarray
    loss_history: list[float] = field(default_factory=list)
    grad_norm_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LowerProblem:
    """A lower-level instance: game, both reward models, a fixed demo set and lam."""

    game: MarkovGame
    model_l: RewardModel
    model_e: RewardModel
    demos: DemoSet
    lam: float

    def __post_init__(self):
        if self.demos.d == 0:
            raise ValueError("lower-level loss needs at least one demonstration")
        self.demos.check_against(self.game)

    @cached_property
    def mu_hat_l(self) -> np.ndarray:
        return empirical_feature_expectation(self.demos, self.model_l, self.game.discount)

    @cached_property
    def mu_hat_e(self) -> np.ndarray:
        return empirical_feature_expectation(self.demos, self.model_e, self.game.discount)

    def solve(self, theta_l, theta_e) -> SoftSolution:
        return solve_soft(self.game, (self.model_l, theta_l), (self.model_e, theta_e), validate=False)

    def loss(self, theta_l, theta_e, sol: SoftSolution | None = None) -> float:
        if sol is None:
            sol = self.solve(theta_l, theta_e)
        theta_e = np.asarray(theta_e, dtype=float)
        fitted = self.mu_hat_l @ theta_l + self.mu_hat_e @ theta_e
        log_partition = self.game.initial_dist @ sol.v[0]
        return float(log_partition - fitted + 0.5 * self.lam * theta_e @ theta_e)

    def model_moments(self, theta_l, theta_e) -> tuple[np.ndarray, np.ndarray]:
        """Model feature expectations ``(mu_l, mu_e)`` under the current joint policy."""
        occ = occupancy(self.game, self.solve(theta_l, theta_e).policy)
        return feature_expectation(occ, self.model_l), feature_expectation(occ, self.model_e)

    def batch_visits(self, theta_l, theta_e) -> np.ndarray:
        """Discounted visitation summed over steps, for stacks of parameters.

        Either argument may be a single vector or a (B, dim) stack.
        """
        theta_l, theta_e = np.asarray(theta_l, dtype=float), np.asarray(theta_e, dtype=float)
        table_l = self.model_l.tables(np.atleast_2d(theta_l))
        table_e = self.model_e.tables(np.atleast_2d(theta_e))
        _, _, policy = soft_tables(self.game, table_l + table_e)
        return occupancy_tables(self.game, policy).sum(axis=1)

    def batch_grads(self, theta_l, theta_e) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(grad_l, grad_e)`` of the loss, each of shape (B, dim)."""
        visits = self.batch_visits(theta_l, theta_e)
        g_l = _batch_features(visits, self.model_l) - self.mu_hat_l
        g_e = _batch_features(visits, self.model_e) - self.mu_hat_e + self.lam * np.atleast_2d(theta_e)
        return g_l, g_e

    def grad_e(self, theta_l, theta_e) -> np.ndarray:
        return self.loss_and_grad_e(theta_l, theta_e)[1]

    def loss_and_grad_e(self, theta_l, theta_e) -> tuple[float, np.ndarray]:
        sol = self.solve(theta_l, theta_e)
        mu_e = feature_expectation(occupancy(self.game, sol.policy), self.model_e)
        g = mu_e - self.mu_hat_e + self.lam * np.asarray(theta_e, dtype=float)
        return self.loss(theta_l, theta_e, sol), g

    def grad_l(self, theta_l, theta_e) -> np.ndarray:
        mu_l, _ = self.model_moments(theta_l, theta_e)
        return mu_l - self.mu_hat_l

    def grads(self, theta_l, theta_e) -> tuple[np.ndarray, np.ndarray]:
        mu_l, mu_e = self.model_moments(theta_l, theta_e)
        return mu_l - self.mu_hat_l, mu_e - self.mu_hat_e + self.lam * np.asarray(theta_e, dtype=float)


def lower_loss(game, model_l, theta_l, model_e, theta_e, demos, lam) -> float:
    return LowerProblem(game, model_l, model_e, demos, lam).loss(theta_l, theta_e)


def lower_grad_e(game, model_l, theta_l, model_e, theta_e, demos, lam) -> np.ndarray:
    """``mu_e(pi) - mu_hat_e(D) + lam * theta_e``."""
    return LowerProblem(game, model_l, model_e, demos, lam).grad_e(theta_l, theta_e)


def lower_grad_l(game, model_l, theta_l, model_e, theta_e, demos) -> np.ndarray:
    """``mu_l(pi) - mu_hat_l(D)``; the regularizer does not involve theta_l."""
    return LowerProblem(game, model_l, model_e, demos, 1.0).grad_l(theta_l, theta_e)


def demo_log_likelihood(game: MarkovGame, solution: SoftSolution, demos: DemoSet) -> float:
    """Average over demos of ``sum_h log pi_h(a_ih | s_ih)``.

    This is the per-step action likelihood; it differs from the trajectory
    form used by :func:`lower_loss` by terms that depend on the transitions.
    """
    if demos.d == 0:
        raise ValueError("empty demo set")
    demos.check_against(game)
    steps = np.arange(demos.horizon)
    logp = solution.q[steps, demos.states, demos.learner_actions, demos.expert_actions]
    logp = logp - solution.v[steps, demos.states]
    return float(logp.sum(axis=1).mean())


def _mc_grad_e(problem: LowerProblem, theta_l, theta_e, n: int, rng) -> np.ndarray:
    sol = problem.solve(theta_l, theta_e)
    sampled = sample_trajectories(problem.game, sol.policy, n, rng)
    mu_e = empirical_feature_expectation(sampled, problem.model_e, problem.game.discount)
    return mu_e - problem.mu_hat_e + problem.lam * theta_e


def inner_loop(
    problem: LowerProblem,
    theta_l,
    theta_e_init,
    config: LowerConfig,
    t_k: int,
    rng: np.random.Generator | None = None,
) -> LowerState:
    """``t_k`` projected gradient steps on theta_e with theta_l held fixed.

    ``loss_history`` and ``grad_norm_history`` record the value at each
    iterate before its step. With ``config.exact_expectations`` off the
    model moments are sampled, which requires ``rng``.
    """
    if t_k < 1:
        raise ValueError(f"t_k must be >= 1, got {t_k}")
    if not config.exact_expectations and rng is None:
        raise ValueError("sampled expectations need an rng")
    theta_l = np.asarray(theta_l, dtype=float)
    state = LowerState(project_ball(theta_e_init))
    for t in range(t_k):
        if config.exact_expectations:
            loss, g = problem.loss_and_grad_e(theta_l, state.theta_e)
        else:
            loss = problem.loss(theta_l, state.theta_e)
            g = _mc_grad_e(problem, theta_l, state.theta_e, config.mc_rollouts, rng)
        state.loss_history.append(loss)
        state.grad_norm_history.append(float(np.linalg.norm(g)))
        state.theta_e = project_ball(state.theta_e - config.beta(t) * g)
    return state
